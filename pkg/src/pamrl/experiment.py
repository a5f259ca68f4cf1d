"""Builds systems from a RunConfig and runs train / eval / sweep / export."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .encoder import (
    AdapterNet,
    FrozenEncoder,
    StateRepresentation,
    load_external_embeddings,
    pretrain_adapters,
)
from .env import SlicingEnv
from .marl import (
    AgentPool,
    TrainingResult,
    collect_pretrain_pairs,
    evaluate,
    iterations_to_converge,
    moving_average,
    run_training,
)
from .prompt import ContextTokens, PromptTemplate, TokenVocab
from .toys import SemanticToyEnv, StationaryToyEnv

log = logging.getLogger(__name__)

RUN_FILES = ("config.snapshot", "metrics.csv", "ue_rates.csv")


def env_factory(cfg: RunConfig, seed: int):
    """make_env(i) for DU index i."""
    if cfg.env == "slicing":
        return lambda i: SlicingEnv(cfg.cell, cfg.slices, cfg.reward, du_index=i, seed=seed)
    if cfg.env == "stationary_toy":
        t = cfg.toy
        return lambda i: StationaryToyEnv(t.n_rbs, t.n_ues, t.kind, t.threshold_ratio, cfg.reward,
                                          seed=cfg.cell.seed)
    t = cfg.toy
    return lambda i: SemanticToyEnv(t.n_rbs, t.high, t.low, cfg.reward, seed=seed,
                                     nuisance_mbps=t.nuisance_mbps)


def build_representation(cfg: RunConfig, seed: int, obs_dim: int) -> StateRepresentation:
    template = PromptTemplate.from_file(cfg.resolve(cfg.prompt.template)) if cfg.prompt.template \
        else PromptTemplate()
    vocab = TokenVocab.from_templates([template.sentence])
    e = cfg.encoder
    encoder = FrozenEncoder(len(vocab), e.d_model, e.n_blocks, e.d_ff, seed=cfg.encoder_seed)
    if cfg.external_embeddings:
        encoder.external = load_external_embeddings(cfg.resolve(cfg.external_embeddings), e.d_model)
    ctx = ContextTokens(cfg.n_ctx, e.d_model, np.random.default_rng([seed, 5]), std=cfg.prompt.ctx_std)
    rng = np.random.default_rng([seed, 6])
    f_c1 = AdapterNet("numeric", obs_dim, e.d_f, rng, hidden=e.adapter_hidden)
    f_c2 = AdapterNet("text", e.d_model, e.d_f, rng, hidden=e.adapter_hidden)
    return StateRepresentation(encoder, vocab, ctx, f_c1, f_c2, template)


@dataclass
class System:
    pool: AgentPool
    pretrain_curve: list


def build_system(cfg: RunConfig, seed: int, pretrain: bool = True) -> System:
    """Encoder, context rows and adapters (pretrained, then frozen) plus the agent pool.

    With ``pretrain=False`` the adapters are frozen at initialization; use
    this only when a checkpoint will overwrite them.
    """
    make_env = env_factory(cfg, seed)
    probe = make_env(0)
    srm = build_representation(cfg, seed, probe.obs_dim)
    curve = []
    if pretrain:
        e = cfg.encoder
        s, h = collect_pretrain_pairs(srm, make_env, e.pretrain_pairs, cfg.train.episode_length,
                                      cfg.train.n_actors, seed)
        res = pretrain_adapters(srm.f_c1, srm.f_c2, s, h, epochs=e.pretrain_epochs,
                                batch_size=min(e.pretrain_batch, len(s)), lr=e.pretrain_lr,
                                rng=np.random.default_rng([seed, 8]), std_floor=e.std_floor)
        curve = res.total
    else:
        srm.f_c1.freeze()
        srm.f_c2.freeze()
    pool = AgentPool(srm, make_env, cfg.train.n_actors, cfg.sac, seed)
    return System(pool, curve)


def _file_logger(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("pamrl").addHandler(handler)
    logging.getLogger("pamrl").setLevel(logging.INFO)
    return handler


def train_one(cfg: RunConfig, seed: int, out_dir) -> TrainingResult:
    """Pretrain adapters and train one seed into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.snapshot").write_text(cfg.snapshot(seed))
    handler = _file_logger(out_dir / "events.log")
    try:
        log.info("run seed=%d variant=%s n_ctx=%d env=%s", seed, cfg.variant, cfg.n_ctx, cfg.env)
        system = build_system(cfg, seed)
        if system.pretrain_curve:
            log.info("adapter pretraining loss %.6g -> %.6g", system.pretrain_curve[0], system.pretrain_curve[-1])
        return run_training(system.pool, dataclasses.replace(cfg.train, seed=seed), out_dir)
    finally:
        logging.getLogger("pamrl").removeHandler(handler)
        handler.close()


def cmd_train(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    dirs = []
    for seed in cfg.seeds:
        d = out / f"seed_{seed}"
        train_one(cfg, seed, d)
        dirs.append(d)
    return dirs


def cmd_eval(run_dir, episodes: int | None = None, seed: int | None = None) -> Path:
    """Deterministic evaluation of a finished run's checkpoint; writes eval.csv."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.snapshot")
    run_seed = cfg.seeds[0]
    system = build_system(cfg, run_seed, pretrain=False)
    system.pool.load(run_dir / "checkpoints")
    n = episodes if episodes is not None else cfg.train.eval_episodes
    res = evaluate(system.pool, n, cfg.train.episode_length, run_seed if seed is None else seed)
    path = run_dir / "eval.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["actor", "episodes", "return_mean", "return_std"])
        for i, (m, s) in enumerate(zip(res.mean, res.std)):
            w.writerow([i, n, repr(float(m)), repr(float(s))])
    return path


# ---------------------------------------------------------------------------
# Sweep


def read_metrics(run_dir) -> dict[str, np.ndarray]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{run_dir}: metrics.csv has no rows")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def run_summary(run_dir, smoothing: int, window: int, tol: float) -> dict:
    m = read_metrics(run_dir)
    smooth = moving_average(m["reward_mean"], smoothing)
    conv = iterations_to_converge(m["reward_mean"], window, tol)
    return {
        "max_smoothed_reward": float(smooth.max()),
        "final_smoothed_reward": float(smooth[-1]),
        "iterations_to_converge": conv,
        "iterations": int(m["iteration"][-1]),
    }


SWEEP_COLUMNS = ["n_ctx", "seed", "max_smoothed_reward", "iterations_to_converge", "status", "is_max"]


def cmd_sweep(cfg: RunConfig, values) -> Path:
    values = [int(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(cfg.out)
    rows = []
    for v in values:
        sub = cfg.with_overrides(n_ctx=v)
        for seed in cfg.seeds:
            d = out / f"n_ctx_{v}" / f"seed_{seed}"
            row = {"n_ctx": v, "seed": seed, "max_smoothed_reward": "", "iterations_to_converge": "",
                   "status": "ok", "is_max": 0}
            try:
                train_one(sub, seed, d)
                s = run_summary(d, cfg.smoothing_window, cfg.train.convergence_window, cfg.train.convergence_tol)
                row["max_smoothed_reward"] = repr(s["max_smoothed_reward"])
                conv = s["iterations_to_converge"]
                row["iterations_to_converge"] = "" if conv is None else conv
            except Exception as exc:  # a failed point is recorded, the sweep goes on
                log.error("sweep point n_ctx=%d seed=%d failed: %s", v, seed, exc)
                row["status"] = f"failed: {type(exc).__name__}: {exc}"
                (d / "error.txt").parent.mkdir(parents=True, exist_ok=True)
                (d / "error.txt").write_text(traceback.format_exc())
            rows.append(row)
    mark_argmax(rows)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return path


def mark_argmax(rows) -> None:
    """Flag the first row with the largest max_smoothed_reward among successful runs."""
    best, best_i = -math.inf, None
    for i, r in enumerate(rows):
        if r["status"] == "ok" and r["max_smoothed_reward"] != "":
            v = float(r["max_smoothed_reward"])
            if v > best:
                best, best_i = v, i
    for i, r in enumerate(rows):
        r["is_max"] = int(i == best_i)


# ---------------------------------------------------------------------------
# Export


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Sorted sample and F(x) = (# samples <= x) / n at each distinct value."""
    x = np.sort(np.asarray(values, dtype=float))
    if len(x) == 0:
        return x, x
    uniq = np.unique(x)
    counts = np.searchsorted(x, uniq, side="right")
    return uniq, counts / len(x)


def read_ue_rates(run_dir, last: int | None = None) -> dict[int, np.ndarray]:
    """Per-slice UE rates from ue_rates.csv, optionally only the final ``last`` iterations."""
    with open(Path(run_dir) / "ue_rates.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    it = np.array([int(r["iteration"]) for r in rows])
    keep = it > it.max() - last if last is not None else np.ones(len(rows), bool)
    out: dict[int, list] = {}
    for r, k in zip(rows, keep):
        if k:
            out.setdefault(int(r["slice"]), []).append(float(r["rate"]))
    return {l: np.array(v) for l, v in sorted(out.items())}


def _complete(run_dir: Path) -> bool:
    return all((run_dir / f).exists() for f in RUN_FILES) and (run_dir / "checkpoints" / "final.ckpt").exists()


def cmd_export(run_dirs, out, smoothing: int = 50, final_window: int = 50) -> Path:
    """Plot-ready data from finished runs, grouped by variant.

    Writes reward_curves.csv, reward_runs.csv, ue_cdf.csv, summary.csv and
    export_meta.txt into ``out``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for d in map(Path, run_dirs):
        if not _complete(d):
            log.warning("skipping incomplete run %s", d)
            continue
        cfg = load_config(d / "config.snapshot")
        runs.append((d, cfg, read_metrics(d)))
    if not runs:
        raise ValueError("no complete runs to export")

    by_variant: dict[str, list] = {}
    for d, cfg, m in runs:
        by_variant.setdefault(cfg.variant, []).append((d, cfg, m))

    # (a) smoothed per-iteration return curves
    with open(out / "reward_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "run", "iteration", "reward", "smoothed"])
        for d, cfg, m in runs:
            sm = moving_average(m["reward_mean"], smoothing)
            for it, r, s in zip(m["iteration"], m["reward_mean"], sm):
                w.writerow([cfg.variant, str(d), int(it), repr(float(r)), repr(float(s))])
    with open(out / "reward_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "iteration", "n_runs", "median", "min", "max"])
        for variant, items in by_variant.items():
            series = [dict(zip(m["iteration"].astype(int), moving_average(m["reward_mean"], smoothing)))
                      for _, _, m in items]
            its = sorted(set().union(*series))
            for it in its:
                vals = np.array([s[it] for s in series if it in s])
                w.writerow([variant, it, len(vals), repr(float(np.median(vals))),
                            repr(float(vals.min())), repr(float(vals.max()))])

    # (b) per-slice UE throughput CDF over the final iterations
    with open(out / "ue_cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "slice", "rate", "cdf"])
        for variant, items in by_variant.items():
            pooled: dict[int, list] = {}
            for d, _, _ in items:
                for l, v in read_ue_rates(d, final_window).items():
                    pooled.setdefault(l, []).append(v)
            for l in sorted(pooled):
                x, f = empirical_cdf(np.concatenate(pooled[l]))
                for xv, fv in zip(x, f):
                    w.writerow([variant, l, repr(float(xv)), repr(float(fv))])

    # (c) QoS / convergence summary against marl-noprompt
    summary = summarize(by_variant, smoothing, final_window)
    with open(out / "summary.csv", "w", newline="") as fh:
        fields = list(summary[0]) if summary else []
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in summary:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    (out / "export_meta.txt").write_text(
        f"smoothing_window {smoothing}\n"
        f"smoothing trailing moving average over iterations (fewer points at the start)\n"
        f"final_window {final_window}\n"
        f"cdf_source ue_rates.csv rows from the final {final_window} iterations of each run\n"
        f"improvement (variant - baseline) / |baseline| on final-window means, sign flipped for "
        f"latency slices and for iterations-to-converge so that positive means better\n"
        f"baseline marl-noprompt\n"
        f"runs {len(runs)}\n"
    )
    return out


def summarize(by_variant: dict, smoothing: int, final_window: int) -> list[dict]:
    stats = {}
    kinds = None
    for variant, items in by_variant.items():
        q_cols = sorted((k for k in items[0][2] if k.startswith("q_s")), key=lambda k: int(k[3:]))
        kinds = items[0][1].slice_kinds()
        q = np.array([[m[c][-final_window:].mean() for c in q_cols] for _, _, m in items])
        reward = np.array([moving_average(m["reward_mean"], smoothing)[-1] for _, _, m in items])
        conv = []
        for _, cfg, m in items:
            c = iterations_to_converge(m["reward_mean"], cfg.train.convergence_window, cfg.train.convergence_tol)
            conv.append(len(m["reward_mean"]) if c is None else c)
        stats[variant] = (np.median(q, axis=0), float(np.median(reward)), float(np.median(conv)), len(items))
    base = stats.get("marl-noprompt")
    rows = []
    for variant, (q, reward, conv, n) in stats.items():
        row = {"variant": variant, "n_runs": n, "final_smoothed_reward": reward, "iterations_to_converge": conv}
        for l, v in enumerate(q):
            row[f"q_s{l + 1}"] = float(v)
        for l, v in enumerate(q):
            if base is None:
                row[f"improvement_s{l + 1}"] = ""
            else:
                sign = -1.0 if kinds and kinds[l] == "URLLC" else 1.0
                row[f"improvement_s{l + 1}"] = relative_improvement(v, base[0][l], sign)
        row["improvement_convergence"] = "" if base is None else relative_improvement(conv, base[2], -1.0)
        rows.append(row)
    return rows


def relative_improvement(value: float, baseline: float, sign: float = 1.0) -> float:
    """Percent change vs. the baseline; ``sign=-1`` for lower-is-better quantities."""
    if baseline == 0:
        return 0.0 if value == baseline else math.copysign(math.inf, sign * value)
    return float(100.0 * sign * (value - baseline) / abs(baseline))
