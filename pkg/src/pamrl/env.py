"""Single-DU O-RAN slicing environment.

One instance models one RU-DU pair: mobile UEs with Rayleigh-faded per-RB
channels, a hard slice->RB / UE->RB allocation built from a continuous
action, per-slice KPIs, and the sigmoid/penalty reward.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SLICE_KINDS = ("eMBB", "mMTC", "URLLC")
# URLLC latency is the only lower-is-better KPI.
HIGHER_IS_BETTER = {"eMBB": True, "mMTC": True, "URLLC": False}
HEADING_OFFSETS = tuple(s * math.pi / d for d in (3, 6, 12) for s in (-1, 1)) + (0.0,)


@dataclass
class SliceSpec:
    slice_id: int
    kind: str
    threshold: float
    n_users: int
    weight: float = 1.0
    rate_threshold: float = 0.0
    q_min: float | None = None
    slack: float = 0.0

    def __post_init__(self):
        if self.kind not in SLICE_KINDS:
            raise ValueError(f"slice {self.slice_id}: unknown kind {self.kind!r}")
        if self.threshold <= 0:
            raise ValueError(f"slice {self.slice_id}: threshold must be positive")
        if self.weight <= 0:
            raise ValueError(f"slice {self.slice_id}: weight must be positive")
        if self.slack < 0:
            raise ValueError(f"slice {self.slice_id}: slack must be non-negative")
        if self.n_users < 1:
            raise ValueError(f"slice {self.slice_id}: needs at least one UE")

    @property
    def higher_is_better(self) -> bool:
        return HIGHER_IS_BETTER[self.kind]


def normalized_weights(slices) -> np.ndarray:
    w = np.array([s.weight for s in slices], dtype=float)
    return w / w.sum()


@dataclass
class CellConfig:
    n_dus: int = 6
    bandwidth: float = 20e6
    rb_bandwidth: float = 200e3
    subcarrier_spacing: float = 15e3
    tx_power_dbm: float = 56.0
    noise_psd_dbm_hz: float = -174.0
    penalty_lambda: float = 1.0
    seed: int = 0
    cell_size: float = 500.0
    pathloss_exponent: float = 3.0
    reference_loss_db: float = 38.5
    packet_bits: float = 4000.0
    max_latency: float = 0.1
    min_rate: float = 1.0
    epoch: float = 1.0

    def __post_init__(self):
        vals = (self.bandwidth, self.rb_bandwidth, self.tx_power_dbm, self.noise_psd_dbm_hz)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("cell powers and bandwidths must be finite")
        if self.rb_bandwidth <= 0 or self.bandwidth < self.rb_bandwidth:
            raise ValueError("bandwidth must hold at least one RB")

    @property
    def n_rbs(self) -> int:
        return int(math.floor(self.bandwidth / self.rb_bandwidth + 1e-9))

    @property
    def tx_power_w(self) -> float:
        return 10 ** ((self.tx_power_dbm - 30.0) / 10.0)

    @property
    def noise_power_w(self) -> float:
        """Thermal noise over one RB."""
        return 10 ** ((self.noise_psd_dbm_hz - 30.0) / 10.0) * self.rb_bandwidth


@dataclass
class RewardConfig:
    alpha: float = 5.0
    delta: float = 1.0
    margin: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.delta <= 0:
            raise ValueError("alpha and delta must be positive")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")


@dataclass
class UeState:
    ue_id: int
    slice_id: int
    position: np.ndarray
    speed: float
    heading: float
    gains: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rate: float = 0.0
    latency: float = 0.0


@dataclass
class Allocation:
    b: np.ndarray  # slices x RBs
    e: np.ndarray  # UEs x RBs

    def flat(self) -> np.ndarray:
        return np.concatenate([self.b.ravel(), self.e.ravel()]).astype(float)

    def rbs_of(self, slice_index: int) -> np.ndarray:
        return np.flatnonzero(self.b[slice_index])

    def violations(self, ue_slices) -> int:
        """Count broken allocation constraints (0 for a valid allocation)."""
        ue_slices = np.asarray(ue_slices)
        n_rbs = self.b.shape[1]
        bad = 0
        if np.einsum("uk,lk->", self.e, self.b) > n_rbs:
            bad += 1
        bad += int(np.sum(self.b.sum(axis=0) > 1))
        bad += int(np.sum(self.e.sum(axis=0) > 1))
        owner_ok = self.b[ue_slices, :].astype(bool)
        bad += int(np.sum(self.e.astype(bool) & ~owner_ok))
        return bad


@dataclass
class QoSVector:
    values: np.ndarray
    kinds: tuple

    def __getitem__(self, l: int) -> float:
        return float(self.values[l])

    def __len__(self) -> int:
        return len(self.values)

    def _by_kind(self, kind: str) -> float:
        return float(self.values[self.kinds.index(kind)])

    @property
    def mu_r(self) -> float:
        return self._by_kind("eMBB")

    @property
    def d_s(self) -> float:
        return self._by_kind("mMTC")

    @property
    def l_d(self) -> float:
        return self._by_kind("URLLC")


@dataclass
class Observation:
    qos: np.ndarray
    qos_level: np.ndarray
    throughput: np.ndarray  # per-slice mean UE rate, bit/s
    n_users: np.ndarray
    prev_action: np.ndarray
    features: np.ndarray  # numeric state vector fed to the numeric adapter


# ---------------------------------------------------------------------------
# Channel and mobility


def pathloss_gain(distance, cfg: CellConfig):
    d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    return 10 ** (-cfg.reference_loss_db / 10.0) * d ** (-cfg.pathloss_exponent)


def sample_channel(cfg: CellConfig, ue: UeState, time: int, seed: int | None = None) -> np.ndarray:
    """Per-RB power gains |h|^2 * pathloss for one UE at one time index."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([int(seed), int(ue.ue_id), int(time)])
    h = (rng.standard_normal(cfg.n_rbs) + 1j * rng.standard_normal(cfg.n_rbs)) / math.sqrt(2.0)
    return np.abs(h) ** 2 * pathloss_gain(np.linalg.norm(ue.position), cfg)


def _reflect(x: float, half: float) -> tuple[float, bool]:
    span = 2.0 * half
    y = (x + half) % (2.0 * span)
    flips = math.floor((x + half) / span)
    if y > span:
        y = 2.0 * span - y
    return y - half, flips % 2 == 1


def update_mobility(ue: UeState, dt: float, half_size: float = 250.0, rng=None) -> UeState:
    """Move along the heading, reflecting at the square cell edge.

    With ``rng`` the heading offset for the next epoch is redrawn from the
    seven allowed turns.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = ue.position[0] + ue.speed * dt * math.cos(ue.heading)
    y = ue.position[1] + ue.speed * dt * math.sin(ue.heading)
    x, fx = _reflect(x, half_size)
    y, fy = _reflect(y, half_size)
    heading = ue.heading
    if fx:
        heading = math.pi - heading
    if fy:
        heading = -heading
    if rng is not None:
        heading += HEADING_OFFSETS[rng.integers(len(HEADING_OFFSETS))]
    heading = math.remainder(heading, 2.0 * math.pi)
    return replace(ue, position=np.array([x, y]), heading=heading)


# ---------------------------------------------------------------------------
# Allocation


def action_dim(n_slices: int, n_rbs: int, n_ues: int) -> int:
    return n_slices * n_rbs + n_ues * n_rbs


def project_action(raw, n_slices: int, n_rbs: int, ue_slices, penalty_lambda: float = 1.0):
    """Hard allocation from a continuous action in [-1, 1]^dim.

    Each RB goes to the slice with the highest score (lowest id on ties),
    then to the highest-scoring UE of that slice (lowest id on ties).
    Returns the allocation and the soft-sharing penalty mass of the raw
    slice scores, ``lambda * sum_k max(0, sum_l soft_b[l,k] - 1)``.
    """
    raw = np.asarray(raw, dtype=float).ravel()
    ue_slices = np.asarray(ue_slices, dtype=int)
    n_ues = len(ue_slices)
    if raw.size != action_dim(n_slices, n_rbs, n_ues):
        raise ValueError(
            f"action has {raw.size} entries, expected {action_dim(n_slices, n_rbs, n_ues)}"
        )
    slice_scores = raw[: n_slices * n_rbs].reshape(n_slices, n_rbs)
    ue_scores = raw[n_slices * n_rbs :].reshape(n_ues, n_rbs)

    soft_b = (np.clip(slice_scores, -1.0, 1.0) + 1.0) / 2.0
    soft_penalty = penalty_lambda * float(np.maximum(0.0, soft_b.sum(axis=0) - 1.0).sum())

    owner = np.argmax(slice_scores, axis=0)
    b = np.zeros((n_slices, n_rbs), dtype=np.int8)
    b[owner, np.arange(n_rbs)] = 1
    e = np.zeros((n_ues, n_rbs), dtype=np.int8)
    for l in range(n_slices):
        members = np.flatnonzero(ue_slices == l)
        rbs = np.flatnonzero(owner == l)
        if members.size == 0 or rbs.size == 0:
            continue
        winners = members[np.argmax(ue_scores[np.ix_(members, rbs)], axis=0)]
        e[winners, rbs] = 1
    return Allocation(b, e), soft_penalty


# ---------------------------------------------------------------------------
# Rates, KPIs, reward


def shannon_rate(snr, bandwidth: float):
    return bandwidth * np.log2(1.0 + np.asarray(snr, dtype=float))


def compute_snr(gains, cfg: CellConfig):
    return cfg.tx_power_w * np.asarray(gains, dtype=float) / cfg.noise_power_w


def compute_throughput(alloc: Allocation, gains, ue_slices, cfg: CellConfig) -> np.ndarray:
    """Per-UE rate C_i = sum_k e[i,k] b[l(i),k] B log2(1 + SNR[i,k])."""
    ue_slices = np.asarray(ue_slices, dtype=int)
    served = alloc.e * alloc.b[ue_slices, :]
    per_rb = shannon_rate(compute_snr(gains, cfg), cfg.rb_bandwidth)
    return (served * per_rb).sum(axis=1)


def compute_latency(rates, cfg: CellConfig) -> np.ndarray:
    """Time to drain one packet at the achieved rate, capped."""
    rates = np.asarray(rates, dtype=float)
    return np.minimum(cfg.packet_bits / np.maximum(rates, cfg.min_rate), cfg.max_latency)


def compute_qos(spec: SliceSpec, rates, latencies, rate_thresholds=None) -> float:
    rates = np.asarray(rates, dtype=float)
    latencies = np.asarray(latencies, dtype=float)
    if rates.size == 0 or latencies.size == 0:
        raise ValueError(f"slice {spec.slice_id} has no UEs")
    if spec.kind == "eMBB":
        return float(rates.mean())
    if spec.kind == "mMTC":
        lam = spec.rate_threshold if rate_thresholds is None else np.asarray(rate_thresholds)
        return float(np.mean(rates > lam) * rates.sum())
    return float(latencies.max())


def qos_level(qos, slices) -> np.ndarray:
    """KPI normalized by its threshold, oriented so larger is better."""
    out = np.empty(len(slices))
    for l, s in enumerate(slices):
        if s.higher_is_better:
            out[l] = qos[l] / s.threshold
        else:
            out[l] = s.threshold / max(qos[l], 1e-12)
    return out


def effective_margin(spec: SliceSpec, cfg: RewardConfig) -> float:
    """Margin such that thr * (1 - margin) == q_min - slack when q_min is set."""
    if spec.q_min is None:
        return cfg.margin
    floor = spec.q_min - spec.slack
    if spec.higher_is_better:
        return 1.0 - floor / spec.threshold
    return floor / spec.threshold - 1.0


def reward_terms(q, thr, higher_is_better, alpha: float, delta: float, margin):
    """Vectorized sigmoid scores, per-slice penalties and the final reward."""
    q = np.asarray(q, dtype=float)
    thr = np.asarray(thr, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("QoS values must be finite")
    if np.any(thr <= 0):
        raise ValueError("thresholds must be positive")
    hib = np.asarray(higher_is_better, dtype=bool)
    sign = np.where(hib, 1.0, -1.0)
    dev = sign * (q - thr) / thr
    with np.errstate(over="ignore"):  # exp -> inf gives the correct limit r0 = 0
        r0 = 1.0 / (1.0 + np.exp(-alpha * dev))
    # compare against the floor directly so Q == thr (1 - margin) is never a breach
    margin = np.asarray(margin, dtype=float)
    breach = np.where(hib, q < thr * (1.0 - margin), q > thr * (1.0 + margin))
    per_slice = np.where(breach, np.exp(-delta * dev), 0.0)
    penalty = float(per_slice.sum())
    return float(r0.sum()) - penalty, r0, penalty


def compute_reward(qos, slices, cfg: RewardConfig):
    """Return (r_t, per-slice sigmoid scores, penalty)."""
    values = qos.values if isinstance(qos, QoSVector) else np.asarray(qos, dtype=float)
    return reward_terms(
        values,
        [s.threshold for s in slices],
        [s.higher_is_better for s in slices],
        cfg.alpha,
        cfg.delta,
        [effective_margin(s, cfg) for s in slices],
    )


# ---------------------------------------------------------------------------
# Environment


class SlicingEnv:
    """Step/reset MDP for one DU."""

    def __init__(self, cell: CellConfig, slices, reward: RewardConfig | None = None,
                 du_index: int = 0, seed: int | None = None):
        self.cell = cell
        self.slices = list(slices)
        self.reward_cfg = reward or RewardConfig()
        self.du_index = du_index
        self.seed = cell.seed if seed is None else seed
        self.ue_slices = np.concatenate(
            [np.full(s.n_users, l, dtype=int) for l, s in enumerate(self.slices)]
        )
        self.n_ues = len(self.ue_slices)
        self.n_rbs = cell.n_rbs
        self.kinds = tuple(s.kind for s in self.slices)
        self.ues: list[UeState] = []
        self.t = None
        self.info: dict = {}

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def action_dim(self) -> int:
        return action_dim(self.n_slices, self.n_rbs, self.n_ues)

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_slices + self.action_dim

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.seed = seed
        self._rng = np.random.default_rng([int(self.seed), self.du_index, 1])
        half = self.cell.cell_size / 2.0
        self.ues = []
        for i, l in enumerate(self.ue_slices):
            self.ues.append(
                UeState(
                    ue_id=self.du_index * self.n_ues + i,
                    slice_id=self.slices[l].slice_id,
                    position=self._rng.uniform(-half, half, size=2),
                    speed=float(self._rng.uniform(10.0, 20.0)),
                    heading=float(self._rng.uniform(-math.pi, math.pi)),
                )
            )
        self.t = 0
        empty = Allocation(
            np.zeros((self.n_slices, self.n_rbs), dtype=np.int8),
            np.zeros((self.n_ues, self.n_rbs), dtype=np.int8),
        )
        rates = np.zeros(self.n_ues)
        qos = self._qos(rates, compute_latency(rates, self.cell))
        self.info = {}
        return self._observe(qos, rates, empty.flat())

    def _qos(self, rates, latencies) -> QoSVector:
        vals = np.array(
            [
                compute_qos(s, rates[self.ue_slices == l], latencies[self.ue_slices == l])
                for l, s in enumerate(self.slices)
            ]
        )
        return QoSVector(vals, self.kinds)

    def _observe(self, qos: QoSVector, rates, prev_action) -> Observation:
        level = qos_level(qos.values, self.slices)
        counts = np.array([s.n_users for s in self.slices], dtype=float)
        thr = np.array([rates[self.ue_slices == l].mean() for l in range(self.n_slices)])
        features = np.concatenate([np.clip(level, 0.0, 10.0), counts / counts.sum(), prev_action])
        return Observation(qos.values.copy(), level, thr, counts.astype(int), prev_action, features)

    def project(self, raw):
        return project_action(raw, self.n_slices, self.n_rbs, self.ue_slices, self.cell.penalty_lambda)

    def step(self, action):
        """Execute one decision epoch; returns (observation, reward, qos)."""
        if self.t is None:
            raise RuntimeError("call reset() before step()")
        if isinstance(action, Allocation):
            alloc, soft_penalty = action, 0.0
        else:
            alloc, soft_penalty = self.project(action)
        gains = np.stack([sample_channel(self.cell, ue, self.t, self.seed) for ue in self.ues])
        rates = compute_throughput(alloc, gains, self.ue_slices, self.cell)
        latencies = compute_latency(rates, self.cell)
        qos = self._qos(rates, latencies)
        reward, r0, penalty = compute_reward(qos, self.slices, self.reward_cfg)
        for ue, g, c, tau in zip(self.ues, gains, rates, latencies):
            ue.gains, ue.rate, ue.latency = g, float(c), float(tau)
        half = self.cell.cell_size / 2.0
        self.ues = [update_mobility(ue, self.cell.epoch, half, self._rng) for ue in self.ues]
        self.t += 1
        self.info = {
            "allocation": alloc,
            "rates": rates,
            "latencies": latencies,
            "r0": r0,
            "penalty": penalty,
            "soft_penalty": soft_penalty,
            "utility": normalized_weights(self.slices) * r0,
        }
        return self._observe(qos, rates, alloc.flat()), reward, qos


class TrajectoryLog:
    """Collects per-step KPIs and per-UE rates and writes them as CSV."""

    def __init__(self, slice_names):
        self.slice_names = list(slice_names)
        self.rows: list[list] = []
        self.rate_rows: list[list] = []

    def record(self, step: int, qos, reward: float, penalty: float, rates, ue_slices) -> None:
        self.rows.append([step, *[float(q) for q in qos], float(reward), float(penalty)])
        for i, (c, l) in enumerate(zip(rates, ue_slices)):
            self.rate_rows.append([step, i, int(l) + 1, float(c)])

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "trajectory.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *[f"q_{n}" for n in self.slice_names], "reward", "penalty"])
            w.writerows(self.rows)
        with open(directory / "trajectory_ue_rates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "ue", "slice", "rate"])
            w.writerows(self.rate_rows)
