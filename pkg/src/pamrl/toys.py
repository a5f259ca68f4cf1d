"""Small environments with known answers, sharing SlicingEnv's interface."""
from __future__ import annotations

import itertools

import numpy as np

from .env import (
    Allocation,
    CellConfig,
    Observation,
    QoSVector,
    RewardConfig,
    SliceSpec,
    action_dim,
    compute_latency,
    compute_qos,
    compute_reward,
    compute_throughput,
    pathloss_gain,
    project_action,
    qos_level,
)


class _ToyBase:
    slices: list
    cell: CellConfig
    n_rbs: int

    def _setup(self, slices, cell, reward):
        self.slices = list(slices)
        self.cell = cell
        self.reward_cfg = reward or RewardConfig()
        self.kinds = tuple(s.kind for s in self.slices)
        self.n_rbs = cell.n_rbs
        self.ue_slices = np.concatenate(
            [np.full(s.n_users, l, dtype=int) for l, s in enumerate(self.slices)]
        )
        self.n_ues = len(self.ue_slices)
        self.t = None
        self.info = {}

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def action_dim(self) -> int:
        return action_dim(self.n_slices, self.n_rbs, self.n_ues)

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_slices + self.action_dim

    def project(self, raw):
        return project_action(raw, self.n_slices, self.n_rbs, self.ue_slices, self.cell.penalty_lambda)

    def _evaluate(self, alloc: Allocation, slices=None):
        slices = self.slices if slices is None else slices
        rates = compute_throughput(alloc, self.gains, self.ue_slices, self.cell)
        lat = compute_latency(rates, self.cell)
        q = np.array(
            [
                compute_qos(s, rates[self.ue_slices == l], lat[self.ue_slices == l])
                for l, s in enumerate(slices)
            ]
        )
        reward, r0, penalty = compute_reward(q, slices, self.reward_cfg)
        return QoSVector(q, self.kinds), reward, r0, penalty, rates

    def _empty(self) -> Allocation:
        return Allocation(
            np.zeros((self.n_slices, self.n_rbs), dtype=np.int8),
            np.zeros((self.n_ues, self.n_rbs), dtype=np.int8),
        )


class StationaryToyEnv(_ToyBase):
    """One slice, fixed channel gains, no mobility: a bandit with state.

    The slice threshold is ``threshold_ratio`` times the best achievable KPI,
    found by enumerating every UE->RB assignment.
    """

    def __init__(self, n_rbs: int = 4, n_ues: int = 2, kind: str = "eMBB",
                 threshold_ratio: float = 0.8, reward: RewardConfig | None = None, seed: int = 0):
        cell = CellConfig(n_dus=1, bandwidth=n_rbs * 200e3, tx_power_dbm=-10.0, seed=seed)
        rng = np.random.default_rng([seed, 11])
        dist = rng.uniform(100.0, 400.0, size=n_ues)
        self.gains = rng.exponential(1.0, size=(n_ues, n_rbs)) * pathloss_gain(dist, cell)[:, None]
        probe = [SliceSpec(1, kind, 1.0, n_ues)]
        self._setup(probe, cell, reward)
        best = max(self._kpi(a) for a in self.all_allocations())
        if kind == "URLLC":
            thr = -best / threshold_ratio
        else:
            thr = best * threshold_ratio
        self._setup([SliceSpec(1, kind, thr, n_ues)], cell, reward)

    def _kpi(self, alloc) -> float:
        q = self._evaluate(alloc)[0][0]
        return q if self.slices[0].higher_is_better else -q

    def all_allocations(self):
        b = np.ones((1, self.n_rbs), dtype=np.int8)
        for owners in itertools.product(range(self.n_ues), repeat=self.n_rbs):
            e = np.zeros((self.n_ues, self.n_rbs), dtype=np.int8)
            e[list(owners), np.arange(self.n_rbs)] = 1
            yield Allocation(b, e)

    def optimal_reward(self) -> float:
        return max(self._evaluate(a)[1] for a in self.all_allocations())

    def reset(self, seed: int | None = None) -> Observation:
        self.t = 0
        return self._observe(np.zeros(1), np.zeros(self.n_ues), self._empty().flat())

    def _observe(self, q, rates, prev) -> Observation:
        level = qos_level(q, self.slices) if np.any(q) else np.zeros(self.n_slices)
        counts = np.array([s.n_users for s in self.slices])
        thr = np.array([rates[self.ue_slices == l].mean() for l in range(self.n_slices)])
        feats = np.concatenate([np.clip(level, 0, 10), counts / counts.sum(), prev])
        return Observation(np.asarray(q, float), level, thr, counts, prev, feats)

    def step(self, action):
        if self.t is None:
            raise RuntimeError("call reset() before step()")
        alloc = action if isinstance(action, Allocation) else self.project(action)[0]
        qos, reward, r0, penalty, rates = self._evaluate(alloc)
        self.t += 1
        self.info = {"allocation": alloc, "rates": rates, "r0": r0, "penalty": penalty}
        return self._observe(qos.values, rates, alloc.flat()), reward, qos


class SemanticToyEnv(_ToyBase):
    """Two eMBB slices competing for identical RBs; one of them is the priority.

    Each episode draws which slice has the high demand. The draw is visible
    only in the prompt text (as that slice's QoS level); the numeric feature
    vector carries no trace of it. The throughput slot holds per-episode
    random numbers in [0, nuisance_mbps) unrelated to the reward.
    """

    def __init__(self, n_rbs: int = 4, high: float = 0.625, low: float = 0.125,
                 reward: RewardConfig | None = None, seed: int = 0, nuisance_mbps: float = 100.0):
        cell = CellConfig(n_dus=1, bandwidth=n_rbs * 200e3, tx_power_dbm=-10.0, seed=seed)
        self.high, self.low = high, low
        self.nuisance_mbps = nuisance_mbps
        self.seed = seed
        # equal gains: every RB yields the same rate for every UE
        g = pathloss_gain(200.0, cell)
        self.gains = np.full((2, n_rbs), g)
        self._setup([SliceSpec(1, "eMBB", 1.0, 1), SliceSpec(2, "eMBB", 1.0, 1)], cell, reward)
        self.capacity = float(compute_throughput(
            Allocation(np.array([[1] * n_rbs, [0] * n_rbs], dtype=np.int8),
                       np.array([[1] * n_rbs, [0] * n_rbs], dtype=np.int8)),
            self.gains, self.ue_slices, cell)[0])
        self.priority = 0
        self._episode_slices = self.slices

    def _draw(self, seed):
        rng = np.random.default_rng([int(seed), 23])
        self.priority = int(rng.integers(2))
        self.nuisance = rng.uniform(0.0, self.nuisance_mbps, size=2) * 1e6
        demand = np.full(2, self.low)
        demand[self.priority] = self.high
        self.demand = demand
        self._episode_slices = [
            SliceSpec(l + 1, "eMBB", d * self.capacity, 1) for l, d in enumerate(demand)
        ]

    def reset(self, seed: int | None = None) -> Observation:
        self._draw(self.seed if seed is None else seed)
        self.t = 0
        return self._observe(np.zeros(2), self._empty().flat())

    def _observe(self, q, prev) -> Observation:
        feats = np.concatenate([np.zeros(2), np.full(2, 0.5), prev])
        return Observation(np.asarray(q, float), self.demand.copy(), self.nuisance.copy(),
                           np.ones(2, dtype=int), prev, feats)

    def optimal_reward(self) -> float:
        best = -np.inf
        for k in range(self.n_rbs + 1):
            b = np.zeros((2, self.n_rbs), dtype=np.int8)
            b[self.priority, :k] = 1
            b[1 - self.priority, k:] = 1
            best = max(best, self._evaluate(Allocation(b, b.copy()), self._episode_slices)[1])
        return best

    def step(self, action):
        if self.t is None:
            raise RuntimeError("call reset() before step()")
        alloc = action if isinstance(action, Allocation) else self.project(action)[0]
        qos, reward, r0, penalty, rates = self._evaluate(alloc, self._episode_slices)
        self.t += 1
        self.info = {"allocation": alloc, "rates": rates, "r0": r0, "penalty": penalty}
        return self._observe(qos.values, alloc.flat()), reward, qos


class ConstantRewardEnv(_ToyBase):
    """Every step pays ``value``; used to check return bookkeeping."""

    def __init__(self, value: float = 1.0, n_rbs: int = 2):
        cell = CellConfig(n_dus=1, bandwidth=n_rbs * 200e3)
        self.value = value
        self.gains = np.ones((1, n_rbs))
        self._setup([SliceSpec(1, "eMBB", 1.0, 1)], cell, None)

    def reset(self, seed: int | None = None) -> Observation:
        self.t = 0
        return self._observe(self._empty().flat())

    def _observe(self, prev) -> Observation:
        feats = np.concatenate([np.zeros(1), np.ones(1), prev])
        return Observation(np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1, dtype=int), prev, feats)

    def step(self, action):
        if self.t is None:
            raise RuntimeError("call reset() before step()")
        alloc = action if isinstance(action, Allocation) else self.project(action)[0]
        self.t += 1
        self.info = {"allocation": alloc, "rates": np.zeros(self.n_ues), "r0": np.zeros(1), "penalty": 0.0}
        return self._observe(alloc.flat()), self.value, QoSVector(np.zeros(1), self.kinds)
