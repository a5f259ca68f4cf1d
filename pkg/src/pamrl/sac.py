"""Soft actor-critic on fused state vectors."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, Mlp, Tensor, concat, no_grad

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class SacConfig:
    gamma: float = 0.99
    beta: float = 0.01
    batch_size: int = 128
    buffer_capacity: int = 100_000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    ctx_lr: float = 1e-4
    hidden: tuple = (600, 700, 700)
    use_target: bool = False
    polyak: float = 0.995
    literal_target: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size exceeds buffer_capacity")
        self.hidden = tuple(int(h) for h in self.hidden)


class ActorNet:
    """Squashed-Gaussian policy: tanh MLP body with mean and log-std heads."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(600, 700, 700), rng=None,
                 name: str = "actor"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.action_dim = action_dim
        self.body = Mlp([state_dim, *hidden, 2 * action_dim], rng, activation="tanh", name=name)

    def __call__(self, state) -> tuple[Tensor, Tensor]:
        out = self.body(state)
        mu = out[..., : self.action_dim]
        log_std = out[..., self.action_dim :].clip(LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def parameters(self) -> list[Tensor]:
        return self.body.parameters()


class CriticNet:
    """Scalar Q(s, a) with an optional Polyak-averaged target copy."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(600, 700, 700), rng=None,
                 use_target: bool = False, polyak: float = 0.995):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [state_dim + action_dim, *hidden, 1]
        self.body = Mlp(sizes, rng, activation="tanh", name="critic")
        self.polyak = polyak
        self.target = None
        if use_target:
            self.target = Mlp(sizes, rng, activation="tanh", trainable=False, name="critic_target")
            self.target.copy_from(self.body)

    def __call__(self, state, action, target: bool = False) -> Tensor:
        net = self.target if (target and self.target is not None) else self.body
        x = concat([state, action], axis=-1)
        q = net(x)
        return q.reshape(q.shape[:-1])

    def parameters(self) -> list[Tensor]:
        return self.body.parameters()

    def update_target(self) -> None:
        if self.target is None:
            return
        for (w, b), (tw, tb) in zip(self.body.layers, self.target.layers):
            tw.data = self.polyak * tw.data + (1.0 - self.polyak) * w.data
            tb.data = self.polyak * tb.data + (1.0 - self.polyak) * b.data


def squashed_gaussian(mu: Tensor, log_std: Tensor, noise) -> tuple[Tensor, Tensor]:
    """tanh(mu + sigma * noise) and its log-density (summed over the last axis)."""
    noise = np.asarray(noise, dtype=float)
    u = mu + log_std.exp() * noise
    a = u.tanh()
    # -log(1 - tanh(u)^2) = 2 (softplus(-2u) + u - log 2), stable for large |u|
    squash = ((-2.0 * u).softplus() + u - math.log(2.0)) * 2.0
    logp = (-0.5 * noise * noise - _HALF_LOG_2PI - log_std + squash).sum(axis=-1)
    return a, logp


def sample_action(state, actor: ActorNet, mode: str = "stochastic", rng=None, noise=None):
    """Return (action, log pi); log pi is None in deterministic mode."""
    mu, log_std = actor(state)
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_std.data))):
        raise FloatingPointError("actor produced non-finite outputs")
    if mode == "deterministic":
        return mu.tanh(), None
    if mode != "stochastic":
        raise ValueError(f"unknown mode {mode!r}")
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(mu.shape)
    return squashed_gaussian(mu, log_std, noise)


def act(state: np.ndarray, actor: ActorNet, mode: str = "stochastic", rng=None) -> np.ndarray:
    """Graph-free action for environment interaction."""
    with no_grad():
        a, _ = sample_action(Tensor(state), actor, mode, rng)
    return a.data.copy()


# ---------------------------------------------------------------------------
# Replay


@dataclass
class Transition:
    fused: np.ndarray
    action: np.ndarray
    next_fused: np.ndarray
    reward: float
    done: bool = False
    features: np.ndarray | None = None
    text: str = ""
    ids: tuple = ()
    actor_id: int = 0


@dataclass
class Batch:
    fused: np.ndarray
    action: np.ndarray
    next_fused: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    features: np.ndarray
    texts: list = field(default_factory=list)
    ids: list = field(default_factory=list)
    actor_id: np.ndarray = None

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        items = list(items)
        if not items:
            raise ValueError("empty batch")
        feats = [t.features if t.features is not None else np.zeros(0) for t in items]
        return cls(
            fused=np.stack([t.fused for t in items]),
            action=np.stack([t.action for t in items]),
            next_fused=np.stack([t.next_fused for t in items]),
            reward=np.array([t.reward for t in items], dtype=float),
            done=np.array([t.done for t in items], dtype=float),
            features=np.stack(feats),
            texts=[t.text for t in items],
            ids=[t.ids for t in items],
            actor_id=np.array([t.actor_id for t in items], dtype=int),
        )

    def __len__(self) -> int:
        return len(self.reward)


class ReplayBuffer:
    """Fixed-capacity ring of transitions; pushes are serialized by a lock."""

    def __init__(self, capacity: int, rng=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._items: list[Transition] = []
        self._next = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def transitions(self) -> list[Transition]:
        with self._lock:
            return list(self._items)

    def push(self, t: Transition) -> None:
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(t)
            else:
                self._items[self._next] = t
            self._next = (self._next + 1) % self.capacity

    def sample_indices(self, n: int) -> np.ndarray:
        if n > len(self._items):
            raise ValueError(f"cannot sample {n} transitions from a buffer of {len(self._items)}")
        return self.rng.choice(len(self._items), size=n, replace=False)

    def sample(self, n: int) -> Batch:
        with self._lock:
            items = [self._items[i] for i in self.sample_indices(n)]
        return Batch.from_transitions(items)


# ---------------------------------------------------------------------------
# Updates


@dataclass
class UpdateStats:
    loss: float
    q_mean: float = float("nan")
    entropy: float = float("nan")
    log_std_mean: float = float("nan")


def _next_actions(batch: Batch, actors, rng):
    actions = np.empty_like(batch.action)
    logp = np.empty(len(batch))
    for i in np.unique(batch.actor_id):
        rows = np.flatnonzero(batch.actor_id == i)
        a, lp = sample_action(Tensor(batch.next_fused[rows]), actors[i], "stochastic", rng)
        actions[rows] = a.data
        logp[rows] = lp.data
    return actions, logp


def td_targets(batch: Batch, actors, critic: CriticNet, cfg: SacConfig, rng) -> np.ndarray:
    """Soft TD targets; next actions come from each transition's own actor."""
    with no_grad():
        a_next, logp_next = _next_actions(batch, actors, rng)
        q_next = critic(Tensor(batch.next_fused), Tensor(a_next), target=True).data
    keep = 1.0 - batch.done
    if cfg.literal_target:
        return batch.reward + keep * (cfg.gamma * q_next - cfg.beta * logp_next)
    return batch.reward + keep * cfg.gamma * (q_next - cfg.beta * logp_next)


def critic_loss(batch: Batch, critic: CriticNet, y: np.ndarray) -> Tensor:
    q = critic(Tensor(batch.fused), Tensor(batch.action))
    resid = q - y
    return (resid * resid).mean()


def critic_update(batch: Batch, actors, critic: CriticNet, opt: Adam, cfg: SacConfig, rng) -> UpdateStats:
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = td_targets(batch, actors, critic, cfg, rng)
    opt.zero_grad()
    loss = critic_loss(batch, critic, y)
    if not np.isfinite(loss.data):
        raise FloatingPointError("critic loss is not finite")
    loss.backward()
    opt.step()
    critic.update_target()
    return UpdateStats(loss=loss.item(), q_mean=float(np.mean(y)))


def actor_loss(state: Tensor, batch: Batch, actor: ActorNet, critic: CriticNet, cfg: SacConfig,
               noise) -> tuple[Tensor, Tensor, Tensor]:
    """mean(beta log pi - Q); the critic sees the stored (constant) fused state."""
    mu, log_std = actor(state)
    a, logp = squashed_gaussian(mu, log_std, noise)
    q = critic(Tensor(batch.fused), a)
    return (cfg.beta * logp - q).mean(), logp, log_std


def actor_update(batch: Batch, actor: ActorNet, critic: CriticNet, opt: Adam, cfg: SacConfig, rng,
                 srm=None, noise=None) -> UpdateStats:
    """One Adam step on the actor.

    With a state-representation module holding context rows, the actor's
    input is recomputed from the stored prompts so that the same backward
    pass leaves gradients on the context rows (they are not stepped here).
    Critic gradients produced along the way are discarded.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if srm is not None and srm.ctx.n_ctx > 0:
        h = srm.hidden_batch(batch.texts, batch.ids)
        state = srm.fuse(batch.features, h)
    else:
        state = Tensor(batch.fused)
    if noise is None:
        noise = rng.standard_normal((len(batch), actor.action_dim))
    opt.zero_grad()
    loss, logp, log_std = actor_loss(state, batch, actor, critic, cfg, noise)
    if not np.isfinite(loss.data):
        raise FloatingPointError("actor loss is not finite")
    loss.backward()
    opt.step()
    for p in critic.parameters():
        p.grad = None
    return UpdateStats(
        loss=loss.item(),
        entropy=float(-np.mean(logp.data)),
        log_std_mean=float(np.mean(log_std.data)),
    )


def actors_update(batch: Batch, actors, critic: CriticNet, opts, cfg: SacConfig, rng,
                  srm=None) -> list[UpdateStats]:
    """One Adam step on every actor from a shared batch.

    Each actor's loss touches only its own weights, so the summed loss gives
    every actor its own gradient while the context rows receive the sum over
    actors. The prompts are encoded once instead of once per actor. Noise is
    drawn per actor in order, matching repeated calls to `actor_update`.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if srm is not None and srm.ctx.n_ctx > 0:
        state = srm.fuse(batch.features, srm.hidden_batch(batch.texts, batch.ids))
    else:
        state = Tensor(batch.fused)
    total, parts = None, []
    for actor, opt in zip(actors, opts):
        noise = rng.standard_normal((len(batch), actor.action_dim))
        opt.zero_grad()
        loss, logp, log_std = actor_loss(state, batch, actor, critic, cfg, noise)
        if not np.isfinite(loss.data):
            raise FloatingPointError("actor loss is not finite")
        parts.append((loss, logp, log_std))
        total = loss if total is None else total + loss
    total.backward()
    for opt in opts:
        opt.step()
    for p in critic.parameters():
        p.grad = None
    return [UpdateStats(loss=l.item(), entropy=float(-np.mean(lp.data)), log_std_mean=float(np.mean(ls.data)))
            for l, lp, ls in parts]
