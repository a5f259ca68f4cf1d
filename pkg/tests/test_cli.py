import csv

import numpy as np
import pytest

from helpers import TOY_INI
from pamrl.cli import main
from pamrl.config import ConfigError, load_config, parse_config
from pamrl.experiment import empirical_cdf, mark_argmax, read_ue_rates, relative_improvement
from pamrl.marl import moving_average


def write_ini(tmp_path, name="run.ini", variant="pa-mrl", env="semantic_toy", n_ctx=2, iterations=12,
              extra=""):
    path = tmp_path / name
    path.write_text(TOY_INI.format(variant=variant, out=tmp_path / "out", env=env, n_ctx=n_ctx,
                                   iterations=iterations) + extra)
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config errors -------------------------------------------------------------------


def test_missing_threshold_exits_2_and_names_the_field(tmp_path, capsys):
    path = write_ini(tmp_path, env="slicing", extra="\n[slice.1]\nkind = eMBB\nn_users = 2\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "threshold" in capsys.readouterr().err


def test_unknown_key_is_rejected_with_its_line(tmp_path):
    text = TOY_INI.format(variant="pa-mrl", out="x", env="semantic_toy", n_ctx=2, iterations=3)
    text = text.replace("batch_size = 8", "batch_size = 8\nbatchsize = 8")
    line = text.splitlines().index("batchsize = 8") + 1
    with pytest.raises(ConfigError, match=f":{line}:.*batchsize"):
        parse_config(text, source="bad.ini")


def test_bad_variant_exits_2(tmp_path):
    assert main(["train", "--config", str(write_ini(tmp_path)), "--variant", "nope"]) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2


# -- train / eval ----------------------------------------------------------------------


def test_train_twice_gives_identical_metrics(tmp_path):
    path = write_ini(tmp_path)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "a"), "--sequential"]) == 0
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "b"), "--sequential"]) == 0
    a = (tmp_path / "a" / "seed_1" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "seed_1" / "metrics.csv").read_bytes()
    assert a == b


def test_no_prompt_variant_records_zero_context_rows(tmp_path):
    path = write_ini(tmp_path)
    assert main(["train", "--config", str(path), "--variant", "marl-noprompt", "--n-ctx", "8",
                 "--out", str(tmp_path / "np")]) == 0
    snap = load_config(tmp_path / "np" / "seed_1" / "config.snapshot")
    assert snap.variant == "marl-noprompt" and snap.n_ctx == 0
    assert {r["n_ctx"] for r in rows(tmp_path / "np" / "seed_1" / "metrics.csv")} == {"0"}


def test_snapshot_reproduces_the_run(tmp_path):
    path = write_ini(tmp_path)
    assert main(["train", "--config", str(path), "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    snap = tmp_path / "a" / "seed_4" / "config.snapshot"
    assert main(["train", "--config", str(snap), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "seed_4" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "seed_4" / "metrics.csv").read_bytes()


def test_eval_writes_per_actor_returns(tmp_path):
    path = write_ini(tmp_path)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 0
    run = tmp_path / "r" / "seed_1"
    assert main(["eval", str(run), "--episodes", "3"]) == 0
    first = rows(run / "eval.csv")
    assert [int(r["actor"]) for r in first] == [0, 1]
    assert all(int(r["episodes"]) == 3 and np.isfinite(float(r["return_mean"])) for r in first)
    assert main(["eval", str(run), "--episodes", "3"]) == 0
    assert rows(run / "eval.csv") == first


def test_eval_of_missing_run_fails(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "nothing")]) == 2
    assert "config.snapshot" in capsys.readouterr().err


# -- sweep --------------------------------------------------------------------------------


def test_sweep_rows_and_argmax(tmp_path):
    path = write_ini(tmp_path, iterations=8)
    assert main(["sweep", "--config", str(path), "--values", "0,2", "--seed", "1,2",
                 "--out", str(tmp_path / "sw")]) == 0
    table = rows(tmp_path / "sw" / "sweep.csv")
    assert len(table) == 4
    assert [(int(r["n_ctx"]), int(r["seed"])) for r in table] == [(0, 1), (0, 2), (2, 1), (2, 2)]
    assert all(r["status"] == "ok" for r in table)
    assert sum(int(r["is_max"]) for r in table) == 1
    best = max(range(4), key=lambda i: float(table[i]["max_smoothed_reward"]))
    assert int(table[best]["is_max"]) == 1
    for r in table:
        m = rows(tmp_path / "sw" / f"n_ctx_{r['n_ctx']}" / f"seed_{r['seed']}" / "metrics.csv")
        sm = moving_average([float(x["reward_mean"]) for x in m], 50)
        assert float(r["max_smoothed_reward"]) == sm.max()
        assert {x["n_ctx"] for x in m} == {r["n_ctx"]}


def test_argmax_skips_failed_points():
    table = [
        {"status": "failed: boom", "max_smoothed_reward": "", "is_max": 0},
        {"status": "ok", "max_smoothed_reward": "1.5", "is_max": 0},
        {"status": "ok", "max_smoothed_reward": "2.5", "is_max": 0},
        {"status": "ok", "max_smoothed_reward": "2.5", "is_max": 0},
    ]
    mark_argmax(table)
    assert [r["is_max"] for r in table] == [0, 0, 1, 0]


# -- export --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("export")
    path = write_ini(tmp, iterations=15)
    runs = []
    for variant in ("pa-mrl", "marl-noprompt"):
        out = tmp / variant
        assert main(["train", "--config", str(path), "--variant", variant, "--seed", "1,2",
                     "--out", str(out)]) == 0
        runs += [str(out / "seed_1"), str(out / "seed_2")]
    (tmp / "half").mkdir()
    assert main(["export", *runs, str(tmp / "half"), "--out", str(tmp / "ex"), "--window", "5"]) == 0
    return tmp / "ex", runs


def test_cdf_is_monotone_ends_at_one_and_recomputes(exported):
    ex, runs = exported
    table = rows(ex / "ue_cdf.csv")
    assert table
    for variant, group in (("pa-mrl", runs[:2]), ("marl-noprompt", runs[2:])):
        for l in (1, 2):
            sub = [r for r in table if r["variant"] == variant and int(r["slice"]) == l]
            x = np.array([float(r["rate"]) for r in sub])
            f = np.array([float(r["cdf"]) for r in sub])
            assert np.all(np.diff(x) > 0) and np.all(np.diff(f) >= 0)
            assert f[-1] == 1.0
            raw = np.concatenate([read_ue_rates(d, 50)[l] for d in group])
            x2, f2 = empirical_cdf(raw)
            assert np.allclose(x, x2, rtol=0, atol=1e-12) and np.allclose(f, f2, rtol=0, atol=1e-12)


def test_smoothed_curves_recompute(exported):
    ex, runs = exported
    table = rows(ex / "reward_runs.csv")
    for d in runs:
        sub = [r for r in table if r["run"] == d]
        raw = [float(r["reward"]) for r in sub]
        assert np.allclose([float(r["smoothed"]) for r in sub], moving_average(raw, 5), rtol=0, atol=1e-12)
    curves = rows(ex / "reward_curves.csv")
    assert {r["variant"] for r in curves} == {"pa-mrl", "marl-noprompt"}
    assert all(float(r["min"]) <= float(r["median"]) <= float(r["max"]) for r in curves)


def test_baseline_improvement_is_zero_against_itself(exported):
    ex, _ = exported
    summary = {r["variant"]: r for r in rows(ex / "summary.csv")}
    base = summary["marl-noprompt"]
    assert float(base["improvement_s1"]) == 0.0
    assert float(base["improvement_s2"]) == 0.0
    assert float(base["improvement_convergence"]) == 0.0
    assert "smoothing_window 5" in (ex / "export_meta.txt").read_text()


def test_export_with_no_complete_runs_fails(tmp_path):
    assert main(["export", str(tmp_path), "--out", str(tmp_path / "ex")]) == 1


def test_relative_improvement_signs():
    assert relative_improvement(110.0, 100.0) == pytest.approx(10.0)
    assert relative_improvement(90.0, 100.0, sign=-1.0) == pytest.approx(10.0)
    assert relative_improvement(5.0, 5.0) == 0.0


def test_empirical_cdf_hand_computed():
    x, f = empirical_cdf([3.0, 1.0, 2.0, 2.0])
    assert list(x) == [1.0, 2.0, 3.0]
    assert list(f) == [0.25, 0.75, 1.0]
