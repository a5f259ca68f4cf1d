"""Prompt rows against the static text path on the semantic toy.

Which slice carries the high demand is drawn per episode and appears only in
the prompt text. Both variants read that text through the frozen encoder;
pa-mrl additionally trains context rows. The script trains both variants on
the same seeds and prints final smoothed reward and iterations to converge.

Run from the repository root:  python3 demos/semantic_toy.py [seeds, e.g. 1,2]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from pamrl.config import load_config
from pamrl.experiment import env_factory, train_one
from pamrl.marl import iterations_to_converge, moving_average

seeds = [int(s) for s in (sys.argv[1] if len(sys.argv) > 1 else "1,2").split(",")]
path = Path(__file__).parent.parent / "configs" / "semantic_toy.ini"

env = env_factory(load_config(path), seeds[0])(0)
levels = []
for ep in range(2):
    env.reset(seed=ep)
    levels.append(env.optimal_reward())
print(f"per-step optimum when the priority slice is known: {np.mean(levels):.3f}")

with tempfile.TemporaryDirectory() as tmp:
    for variant in ("pa-mrl", "marl-noprompt"):
        cfg = load_config(path).with_overrides(variant=variant, seeds=seeds)
        finals, convs = [], []
        for seed in cfg.seeds:
            res = train_one(cfg, seed, Path(tmp) / variant / f"seed_{seed}")
            rewards = [r["reward_mean"] for r in res.rows]
            finals.append(moving_average(rewards, cfg.smoothing_window)[-1])
            c = iterations_to_converge(rewards, cfg.train.convergence_window, cfg.train.convergence_tol)
            convs.append(c if c is not None else len(rewards))
        print(f"{variant:14s} n_ctx {cfg.n_ctx:2d}  final smoothed {np.round(finals, 3)}"
              f"  iterations to converge {convs}")
