"""Train the SAC agent on the one-slice stationary toy and compare with the brute-force optimum.

Run from the repository root:  python3 demos/stationary_toy.py [seed]
"""
import sys
import tempfile
from pathlib import Path

from pamrl.config import load_config
from pamrl.experiment import env_factory, train_one
from pamrl.marl import moving_average

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
cfg = load_config(Path(__file__).parent.parent / "configs" / "stationary_toy.ini")
env = env_factory(cfg, seed)(0)
best = env.optimal_reward()
print(f"brute-force optimum R* = {best:.4f}")

with tempfile.TemporaryDirectory() as tmp:
    res = train_one(cfg, seed, Path(tmp) / f"seed_{seed}")
rewards = [r["reward_mean"] for r in res.rows]
smooth = moving_average(rewards, cfg.smoothing_window)
for it in range(0, len(smooth), max(1, len(smooth) // 10)):
    print(f"iteration {it:5d}  smoothed reward {smooth[it]:.4f}")
print(f"final smoothed {smooth[-1]:.4f} = {smooth[-1] / best:.1%} of R*"
      f"  (converged at {res.converged_at})")
