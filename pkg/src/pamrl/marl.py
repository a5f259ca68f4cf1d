"""Prompt-augmented multi-agent SAC training loop.

N DU-level actors, each with its own environment and policy, share one
state-representation module (encoder, adapters, context rows), one replay
buffer and one critic. Per iteration every actor collects experience, then
the critic, the actors and finally the context rows are updated.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import StateRepresentation
from .nn import Adam, adam_step, load_checkpoint, save_checkpoint, tensor_hash
from .sac import (
    ActorNet,
    CriticNet,
    ReplayBuffer,
    SacConfig,
    Transition,
    act,
    actors_update,
    critic_update,
)

log = logging.getLogger(__name__)


@dataclass
class TrainLoopConfig:
    iterations: int = 1000
    n_actors: int = 6
    eval_episodes: int = 1
    steps_per_iteration: int = 1
    episode_length: int = 10
    updates_per_iteration: int = 1
    warmup_steps: int = 256
    eval_interval: int = 10
    convergence_window: int = 100
    convergence_tol: float = 1e-3
    seed: int = 1
    sequential: bool = True
    terminal_at_horizon: bool = False
    train_context: bool = True

    def __post_init__(self):
        if self.n_actors < 1:
            raise ValueError("n_actors must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.convergence_window < 2:
            raise ValueError("convergence_window must be at least 2")
        if self.steps_per_iteration < 1 or self.episode_length < 1:
            raise ValueError("steps_per_iteration and episode_length must be positive")


class TrainingAborted(RuntimeError):
    pass


def episode_seed(seed: int, stream: int, actor: int, episode: int) -> int:
    """Seed for one episode; stream 0 is training, stream 1 evaluation."""
    return int(np.random.SeedSequence([int(seed), stream, actor, episode]).generate_state(1)[0])


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def check_convergence(history, window: int, tol: float) -> bool:
    """Plateau test on the last two disjoint windows of the history.

    True iff |m2 - m1| / max(|m1|, 1e-12) < tol, where m1 and m2 are the
    means of the previous and the latest ``window`` values. Needs at least
    two full windows.
    """
    h = np.asarray(history, dtype=float)
    if len(h) < 2 * window:
        return False
    m1 = h[-2 * window : -window].mean()
    m2 = h[-window:].mean()
    return bool(abs(m2 - m1) / max(abs(m1), 1e-12) < tol)


def iterations_to_converge(history, window: int, tol: float) -> int | None:
    for n in range(2 * window, len(history) + 1):
        if check_convergence(history[:n], window, tol):
            return n
    return None


@dataclass
class _ActorState:
    obs: object
    fused: np.ndarray
    text: str
    ids: list
    ep_step: int = 0
    episode: int = 0


@dataclass
class EvalResult:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class TrainingResult:
    rows: list = field(default_factory=list)
    converged_at: int | None = None
    iterations: int = 0


class AgentPool:
    """Actors, their environments, the shared critic, buffer and optimizers."""

    def __init__(self, srm: StateRepresentation, make_env, n_actors: int, sac: SacConfig, seed: int):
        self.srm = srm
        self.make_env = make_env
        self.sac = sac
        self.seed = seed
        self.envs = [make_env(i) for i in range(n_actors)]
        self.eval_envs = [make_env(i) for i in range(n_actors)]
        act_dim = self.envs[0].action_dim
        state_dim = srm.fused_dim
        seqs = np.random.SeedSequence([int(seed), 42]).spawn(n_actors + 3)
        self.actors = [
            ActorNet(state_dim, act_dim, sac.hidden, np.random.default_rng(seqs[i]), name=f"actor{i}")
            for i in range(n_actors)
        ]
        self.critic = CriticNet(state_dim, act_dim, sac.hidden, np.random.default_rng(seqs[n_actors]),
                                use_target=sac.use_target, polyak=sac.polyak)
        self.buffer = ReplayBuffer(sac.buffer_capacity, np.random.default_rng(seqs[n_actors + 1]))
        self.update_rng = np.random.default_rng(seqs[n_actors + 2])
        self.act_rngs = [np.random.default_rng([int(seed), 100 + i]) for i in range(n_actors)]
        self.actor_opts = [Adam(a.parameters(), lr=sac.actor_lr) for a in self.actors]
        self.critic_opt = Adam(self.critic.parameters(), lr=sac.critic_lr)
        self.ctx_opt = Adam(srm.ctx.parameters(), lr=sac.ctx_lr)

    @property
    def n_actors(self) -> int:
        return len(self.actors)

    @property
    def ctx(self):
        return self.srm.ctx

    def parameter_hash(self) -> str:
        params = [p for a in self.actors for p in a.parameters()]
        params += self.critic.parameters() + self.srm.ctx.parameters()
        params += self.srm.f_c1.parameters() + self.srm.f_c2.parameters()
        return tensor_hash(params)

    def state_dict(self) -> dict:
        out = {}
        for i, a in enumerate(self.actors):
            out.update(a.body.state_dict(f"actor{i}"))
        out.update(self.critic.body.state_dict("critic"))
        if self.critic.target is not None:
            out.update(self.critic.target.state_dict("critic_target"))
        out["ctx"] = self.srm.ctx.embeddings.data
        out.update(self.srm.f_c1.body.state_dict("adapter_numeric"))
        out.update(self.srm.f_c2.body.state_dict("adapter_text"))
        out.update(self.srm.encoder.state_dict())
        return out

    def save(self, directory) -> None:
        directory = Path(directory)
        save_checkpoint(directory / "final.ckpt", self.state_dict())
        self.srm.vocab.save(directory / "vocab.txt")

    def load(self, directory) -> None:
        state = load_checkpoint(Path(directory) / "final.ckpt")
        for i, a in enumerate(self.actors):
            a.body.load_state_dict(state, f"actor{i}")
        self.critic.body.load_state_dict(state, "critic")
        if self.critic.target is not None and "critic_target.w0" in state:
            self.critic.target.load_state_dict(state, "critic_target")
        if state["ctx"].shape != self.srm.ctx.embeddings.shape:
            raise ValueError("checkpoint context rows do not match n_ctx")
        self.srm.ctx.embeddings.data = state["ctx"].copy()
        self.srm.f_c1.body.load_state_dict(state, "adapter_numeric")
        self.srm.f_c2.body.load_state_dict(state, "adapter_text")
        self.srm.bump_ctx_version()


def update_context_tokens(ctx, opt: Adam) -> bool:
    """One Adam step on the context rows from their accumulated gradient.

    Returns False (and leaves the rows untouched) when there is nothing to
    do: no rows, or no / all-zero gradient.
    """
    if ctx.n_ctx == 0:
        return False
    g = ctx.embeddings.grad
    if g is None or not np.any(g):
        ctx.embeddings.grad = None
        return False
    if g.shape != ctx.embeddings.shape:
        raise ValueError(f"gradient shape {g.shape} != context shape {ctx.embeddings.shape}")
    adam_step([ctx.embeddings], [g], opt.state)
    ctx.embeddings.grad = None
    return True


def evaluate(pool: AgentPool, n_episodes: int, episode_length: int, seed: int | None = None) -> EvalResult:
    """Deterministic-policy returns per actor on evaluation-seeded episodes.

    Writes nothing to the buffer and changes no parameters.
    """
    seed = pool.seed if seed is None else seed
    means, stds = [], []
    for i, (actor, env) in enumerate(zip(pool.actors, pool.eval_envs)):
        returns = []
        for ep in range(n_episodes):
            obs = env.reset(episode_seed(seed, 1, i, ep))
            total = 0.0
            for _ in range(episode_length):
                fused, _, _ = pool.srm.represent(obs)
                action = act(fused, actor, "deterministic")
                obs, r, _ = env.step(action)
                total += r
            returns.append(total)
        means.append(float(np.mean(returns)))
        stds.append(float(np.std(returns)))
    return EvalResult(np.array(means), np.array(stds))


class Trainer:
    """Runs the training loop for one pool and writes the run directory."""

    def __init__(self, pool: AgentPool, cfg: TrainLoopConfig, out_dir=None):
        self.pool = pool
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.states: list[_ActorState] = []
        self.env_steps = 0
        self.critic_updates = 0

    # -- rollout ------------------------------------------------------------
    def _start_episode(self, i: int, episode: int) -> _ActorState:
        obs = self.pool.envs[i].reset(episode_seed(self.cfg.seed, 0, i, episode))
        fused, text, ids = self.pool.srm.represent(obs)
        return _ActorState(obs, fused, text, ids, 0, episode)

    def _collect(self, i: int, explore: bool):
        pool, cfg = self.pool, self.cfg
        env, actor, rng = pool.envs[i], pool.actors[i], pool.act_rngs[i]
        st = self.states[i]
        out = {"transitions": [], "rewards": [], "qos": [], "penalty": [], "rates": []}
        for step in range(cfg.steps_per_iteration):
            if explore:
                action = rng.uniform(-1.0, 1.0, size=env.action_dim)
            else:
                action = act(st.fused, actor, "stochastic", rng)
            obs, r, qos = env.step(action)
            st.ep_step += 1
            end = st.ep_step >= cfg.episode_length
            nf, nt, nids = pool.srm.represent(obs)
            out["transitions"].append(
                Transition(st.fused, action, nf, float(r), end and cfg.terminal_at_horizon,
                           st.obs.features, st.text, tuple(st.ids), i)
            )
            out["rewards"].append(float(r))
            out["qos"].append(np.asarray(qos.values, dtype=float))
            out["penalty"].append(float(env.info.get("penalty", 0.0)))
            out["rates"].append((step, np.asarray(env.info.get("rates", [])), env.ue_slices))
            if end:
                st = self._start_episode(i, st.episode + 1)
            else:
                st = _ActorState(obs, nf, nt, nids, st.ep_step, st.episode)
        self.states[i] = st
        return out

    # -- main loop ------------------------------------------------------------
    def run(self) -> TrainingResult:
        pool, cfg = self.pool, self.cfg
        if not pool.srm.adapters_frozen:
            raise RuntimeError("adapters must be pretrained (and frozen) before RL training")
        train_ctx = cfg.train_context and pool.ctx.n_ctx > 0
        self.states = [self._start_episode(i, 0) for i in range(pool.n_actors)]
        result = TrainingResult()
        history: list[float] = []
        last_eval = EvalResult(np.full(pool.n_actors, np.nan), np.full(pool.n_actors, np.nan))
        writer = _RunWriter(self.out_dir) if self.out_dir else None
        executor = None if cfg.sequential else ThreadPoolExecutor(max_workers=pool.n_actors)
        log.info("training: %d iterations, %d actors, n_ctx=%d", cfg.iterations, pool.n_actors, pool.ctx.n_ctx)
        try:
            for it in range(1, cfg.iterations + 1):
                explore = self.env_steps < cfg.warmup_steps
                if executor is None:
                    outs = [self._collect(i, explore) for i in range(pool.n_actors)]
                else:
                    outs = list(executor.map(lambda i: self._collect(i, explore), range(pool.n_actors)))
                for out in outs:
                    for t in out["transitions"]:
                        pool.buffer.push(t)
                self.env_steps += pool.n_actors * cfg.steps_per_iteration

                stats = {"critic_loss": math.nan, "actor_loss": math.nan, "entropy": math.nan,
                         "log_std": math.nan, "q_target": math.nan}
                if len(pool.buffer) >= pool.sac.batch_size and self.env_steps >= cfg.warmup_steps:
                    try:
                        stats = self._learn(train_ctx)
                    except FloatingPointError as exc:
                        self._abort(it, exc, writer)

                if it % cfg.eval_interval == 0 or it == cfg.iterations:
                    last_eval = evaluate(pool, cfg.eval_episodes, cfg.episode_length, cfg.seed)

                # per-actor return over this iteration's steps
                rewards = np.array([np.sum(o["rewards"]) for o in outs])
                history.append(float(rewards.mean()))
                converged = check_convergence(history, cfg.convergence_window, cfg.convergence_tol)
                row = self._row(it, outs, rewards, stats, last_eval, history, converged)
                result.rows.append(row)
                if writer:
                    writer.write(row, it, outs)
                result.iterations = it
                if converged:
                    result.converged_at = it
                    log.info("converged at iteration %d", it)
                    break
        finally:
            if executor is not None:
                executor.shutdown()
            if writer:
                writer.close()
        if self.out_dir:
            pool.save(self.out_dir / "checkpoints")
        log.info("finished after %d iterations", result.iterations)
        return result

    def _learn(self, train_ctx: bool) -> dict:
        pool = self.pool
        acc = {"critic_loss": [], "actor_loss": [], "entropy": [], "log_std": [], "q_target": []}
        for _ in range(self.cfg.updates_per_iteration):
            batch = pool.buffer.sample(pool.sac.batch_size)
            c = critic_update(batch, pool.actors, pool.critic, pool.critic_opt, pool.sac, pool.update_rng)
            self.critic_updates += 1
            acc["critic_loss"].append(c.loss)
            acc["q_target"].append(c.q_mean)
            pool.ctx.embeddings.grad = None
            for a in actors_update(batch, pool.actors, pool.critic, pool.actor_opts, pool.sac,
                                   pool.update_rng, srm=pool.srm if train_ctx else None):
                acc["actor_loss"].append(a.loss)
                acc["entropy"].append(a.entropy)
                acc["log_std"].append(a.log_std_mean)
            if train_ctx:
                g = pool.ctx.embeddings.grad
                if g is not None and not np.all(np.isfinite(g)):
                    raise FloatingPointError("context-row gradient is not finite")
                if update_context_tokens(pool.ctx, pool.ctx_opt):
                    pool.srm.bump_ctx_version()
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def _row(self, it, outs, rewards, stats, ev, history, converged) -> dict:
        pool = self.pool
        qos = np.mean([np.mean(o["qos"], axis=0) for o in outs], axis=0)
        row = {"iteration": it, "n_ctx": pool.ctx.n_ctx, "env_steps": self.env_steps,
               "reward_mean": history[-1]}
        for i, r in enumerate(rewards):
            row[f"reward_a{i}"] = float(r)
        for l, q in enumerate(qos):
            row[f"q_s{l + 1}"] = float(q)
        row["penalty"] = float(np.mean([np.mean(o["penalty"]) for o in outs]))
        row.update(stats)
        for i in range(pool.n_actors):
            row[f"eval_a{i}"] = float(ev.mean[i])
            row[f"eval_std_a{i}"] = float(ev.std[i])
        row["eval_mean"] = float(np.mean(ev.mean))
        row["eval_episodes"] = self.cfg.eval_episodes
        row["converged"] = int(converged)
        return row

    def _abort(self, it, exc, writer):
        if self.out_dir:
            diag = self.out_dir / "diagnostics.txt"
            lines = [f"aborted at iteration {it}: {exc}", f"env_steps {self.env_steps}"]
            for name, tensors in self._named_params():
                bad = sum(int(np.sum(~np.isfinite(t.data))) for t in tensors)
                lines.append(f"{name}: {bad} non-finite values")
            diag.write_text("\n".join(lines) + "\n")
        log.error("aborting at iteration %d: %s", it, exc)
        raise TrainingAborted(f"non-finite values at iteration {it}: {exc}") from exc

    def _named_params(self):
        pool = self.pool
        for i, a in enumerate(pool.actors):
            yield f"actor{i}", a.parameters()
        yield "critic", pool.critic.parameters()
        yield "ctx", pool.ctx.parameters()


def run_training(pool: AgentPool, cfg: TrainLoopConfig, out_dir=None) -> TrainingResult:
    return Trainer(pool, cfg, out_dir).run()


class _RunWriter:
    """Streams metrics.csv and ue_rates.csv so an aborted run keeps its rows."""

    def __init__(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        self._metrics = open(out_dir / "metrics.csv", "w", newline="")
        self._rates = open(out_dir / "ue_rates.csv", "w", newline="")
        self._mw = None
        self._rw = csv.writer(self._rates)
        self._rw.writerow(["iteration", "actor", "step", "ue", "slice", "rate"])

    def write(self, row: dict, it: int, outs) -> None:
        if self._mw is None:
            self._mw = csv.DictWriter(self._metrics, fieldnames=list(row))
            self._mw.writeheader()
        self._mw.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        for i, out in enumerate(outs):
            for step, rates, ue_slices in out["rates"]:
                for u, (c, l) in enumerate(zip(rates, ue_slices)):
                    self._rw.writerow([it, i, step, u, int(l) + 1, repr(float(c))])
        self._metrics.flush()
        self._rates.flush()

    def close(self) -> None:
        self._metrics.close()
        self._rates.close()


# ---------------------------------------------------------------------------
# Offline adapter pretraining data


def collect_pretrain_pairs(srm: StateRepresentation, make_env, n_pairs: int, episode_length: int,
                           n_envs: int, seed: int):
    """(s_t, h_t) pairs from uniformly random actions across the DU environments."""
    rng = np.random.default_rng([int(seed), 9])
    envs = [make_env(i) for i in range(n_envs)]
    states, hiddens = [], []
    episode = 0
    while len(states) < n_pairs:
        for i, env in enumerate(envs):
            obs = env.reset(episode_seed(seed, 2, i, episode))
            for _ in range(episode_length):
                text, ids = srm.prompt(obs)
                states.append(obs.features)
                hiddens.append(srm.hidden_constant(text, ids))
                obs, _, _ = env.step(rng.uniform(-1.0, 1.0, size=env.action_dim))
        episode += 1
    return np.array(states[:n_pairs]), np.array(hiddens[:n_pairs])
