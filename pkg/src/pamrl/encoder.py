"""Frozen text encoder, adapter networks and the fused state representation.

The encoder is a small seeded transformer standing in for a pretrained
language model. Its weights are never trainable; gradients pass through it
only to reach the learnable context rows. Real model embeddings can be
substituted per prompt through an external-embedding file.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Adam, Mlp, Tensor, concat, no_grad, take_rows, tensor_hash, xavier_uniform
from .prompt import (
    ContextTokens,
    PromptTemplate,
    TokenVocab,
    assemble_batch,
    assemble_sequence,
    render_prompt,
)

log = logging.getLogger(__name__)

EMB_MAGIC = "PAMRL-EMB"
EMB_VERSION = 1


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5


class FrozenEncoder:
    """Pre-LN transformer with single-head attention and mean pooling."""

    def __init__(self, vocab_size: int, d_model: int = 64, n_blocks: int = 2, d_ff: int = 128,
                 seed: int = 0, max_len: int = 512):
        rng = np.random.default_rng([seed, 7])
        self.d_model = d_model
        self.embed_table = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d_model)), name="embed")
        self.positions = sinusoidal_positions(max_len, d_model)
        self.blocks = []
        for _ in range(n_blocks):
            self.blocks.append(
                {
                    "wq": Tensor(xavier_uniform(rng, d_model, d_model)),
                    "wk": Tensor(xavier_uniform(rng, d_model, d_model)),
                    "wv": Tensor(xavier_uniform(rng, d_model, d_model)),
                    "wo": Tensor(xavier_uniform(rng, d_model, d_model)),
                    "w1": Tensor(xavier_uniform(rng, d_model, d_ff)),
                    "b1": Tensor(np.zeros(d_ff)),
                    "w2": Tensor(xavier_uniform(rng, d_ff, d_model)),
                    "b2": Tensor(np.zeros(d_model)),
                }
            )
        self.external: dict[str, np.ndarray] = {}
        self._missing_logged: set[str] = set()

    def weights(self) -> list[Tensor]:
        out = [self.embed_table]
        for blk in self.blocks:
            out.extend(blk[k] for k in sorted(blk))
        return out

    def weight_hash(self) -> str:
        return tensor_hash(self.weights())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"encoder.embed": self.embed_table.data}
        for n, blk in enumerate(self.blocks):
            for k, t in blk.items():
                out[f"encoder.{n}.{k}"] = t.data
        return out

    def encode(self, seq: Tensor) -> Tensor:
        """Mean-pooled final hidden state; accepts (T, d) or (B, T, d)."""
        if seq.shape[-2] == 0:
            raise ValueError("cannot encode an empty sequence")
        if seq.shape[-1] != self.d_model:
            raise ValueError(f"sequence width {seq.shape[-1]} != d_model {self.d_model}")
        length = seq.shape[-2]
        x = seq + self.positions[:length]
        scale = 1.0 / math.sqrt(self.d_model)
        for blk in self.blocks:
            z = layer_norm(x)
            q, k, v = z @ blk["wq"], z @ blk["wk"], z @ blk["wv"]
            attn = ((q @ k.transpose()) * scale).softmax(axis=-1)
            x = x + (attn @ v) @ blk["wo"]
            z = layer_norm(x)
            x = x + (z @ blk["w1"] + blk["b1"]).tanh() @ blk["w2"] + blk["b2"]
        return layer_norm(x).mean(axis=-2)

    def lookup(self, text: str) -> np.ndarray | None:
        if not self.external:
            return None
        key = prompt_hash(text)
        vec = self.external.get(key)
        if vec is None and key not in self._missing_logged:
            self._missing_logged.add(key)
            log.warning("no external embedding for prompt %s; using the stand-in encoder", key[:12])
        return vec

    def encode_prompt(self, text: str, seq: Tensor) -> Tensor:
        """External embedding for ``text`` if one was loaded, else ``encode(seq)``."""
        vec = self.lookup(text)
        if vec is not None:
            return Tensor(vec)
        return self.encode(seq)


# ---------------------------------------------------------------------------
# External embeddings
#
# Text file. First line: "PAMRL-EMB <version> <d_model>". Each further line:
# sha256 hex digest of the UTF-8 prompt, then d_model floats, space separated.


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_external_embeddings(path, table: dict) -> None:
    items = sorted(table.items())
    d = len(items[0][1]) if items else 0
    lines = [f"{EMB_MAGIC} {EMB_VERSION} {d}"]
    for key, vec in items:
        lines.append(key + " " + " ".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_external_embeddings(path, d_model: int) -> dict[str, np.ndarray]:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return {}
    head = lines[0].split()
    if len(head) != 3 or head[0] != EMB_MAGIC:
        raise ValueError(f"{path}: missing '{EMB_MAGIC}' header")
    if int(head[1]) != EMB_VERSION:
        raise ValueError(f"{path}: unsupported version {head[1]}")
    table = {}
    for n, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        key, vals = parts[0], parts[1:]
        if len(key) != 64 or any(c not in "0123456789abcdef" for c in key):
            raise ValueError(f"{path}:{n}: malformed prompt hash")
        if len(vals) != d_model:
            raise ValueError(f"{path}:{n}: expected {d_model} values, found {len(vals)}")
        try:
            table[key] = np.array([float(v) for v in vals])
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
    return table


# ---------------------------------------------------------------------------
# Adapters


class AdapterNet:
    """Maps numeric state (role 'numeric') or encoder output (role 'text') to width d_f."""

    def __init__(self, role: str, in_dim: int, d_f: int, rng, hidden: int = 64):
        if role not in ("numeric", "text"):
            raise ValueError(f"unknown adapter role {role!r}")
        self.role = role
        self.body = Mlp([in_dim, hidden, d_f], rng, activation="tanh", name=f"adapter_{role}")

    @property
    def in_dim(self) -> int:
        return self.body.in_dim

    @property
    def out_dim(self) -> int:
        return self.body.out_dim

    def __call__(self, x) -> Tensor:
        return self.body(x)

    def parameters(self) -> list[Tensor]:
        return self.body.parameters()

    def freeze(self) -> None:
        self.body.freeze()


@dataclass
class PretrainResult:
    alignment: list = field(default_factory=list)
    total: list = field(default_factory=list)


def _std_floor_penalty(y: Tensor, floor: float) -> Tensor:
    yc = y - y.mean(axis=0, keepdims=True)
    std = ((yc * yc).mean(axis=0) + 1e-6).sqrt()
    return (floor - std).relu().mean()


def alignment_loss(f_c1: AdapterNet, f_c2: AdapterNet, s, h, std_floor: float = 0.5,
                   reg_weight: float = 1.0):
    """(total, alignment) for one batch: MSE(F_c1(s), F_c2(h)) plus a std floor hinge."""
    a = f_c1(s)
    b = f_c2(h)
    diff = a - b
    align = (diff * diff).mean()
    total = align + reg_weight * (_std_floor_penalty(a, std_floor) + _std_floor_penalty(b, std_floor))
    return total, align


def pretrain_adapters(f_c1: AdapterNet, f_c2: AdapterNet, states, hiddens, epochs: int = 200,
                      batch_size: int = 128, lr: float = 1e-3, rng=None, std_floor: float = 0.5,
                      reg_weight: float = 1.0, freeze: bool = True) -> PretrainResult:
    """Offline alignment of the two adapters on (s_t, h_t) pairs.

    Curves hold the per-epoch mean over batches; the entry before any
    update is the loss at initialization.
    """
    states = np.asarray(states, dtype=float)
    hiddens = np.asarray(hiddens, dtype=float)
    n = len(states)
    if n != len(hiddens):
        raise ValueError("states and hiddens differ in length")
    if n < batch_size:
        raise ValueError(f"need at least {batch_size} pairs, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(f_c1.parameters() + f_c2.parameters(), lr=lr)
    result = PretrainResult()

    def full_loss():
        with no_grad():
            total, align = alignment_loss(f_c1, f_c2, states, hiddens, std_floor, reg_weight)
        return total.item(), align.item()

    t0, a0 = full_loss()
    result.total.append(t0)
    result.alignment.append(a0)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            total, _ = alignment_loss(f_c1, f_c2, states[idx], hiddens[idx], std_floor, reg_weight)
            total.backward()
            opt.step()
        t, a = full_loss()
        result.total.append(t)
        result.alignment.append(a)
    if freeze:
        f_c1.freeze()
        f_c2.freeze()
    return result


# ---------------------------------------------------------------------------
# State representation: prompt -> encoder -> adapters


class StateRepresentation:
    """Turns an Observation into the fused state (F_c2(h_t), F_c1(s_t))."""

    def __init__(self, encoder: FrozenEncoder, vocab: TokenVocab, ctx: ContextTokens,
                 f_c1: AdapterNet, f_c2: AdapterNet, template: PromptTemplate | None = None):
        if f_c1.out_dim != f_c2.out_dim:
            raise ValueError("adapters must share an output width")
        if f_c2.in_dim != encoder.d_model:
            raise ValueError("text adapter input must equal d_model")
        self.encoder = encoder
        self.vocab = vocab
        self.ctx = ctx
        self.f_c1 = f_c1
        self.f_c2 = f_c2
        self.template = template or PromptTemplate()
        self.ctx_version = 0
        self._cache: dict = {}

    @property
    def d_f(self) -> int:
        return self.f_c1.out_dim

    @property
    def fused_dim(self) -> int:
        return 2 * self.d_f

    @property
    def adapters_frozen(self) -> bool:
        return not (self.f_c1.body.trainable or self.f_c2.body.trainable)

    def prompt(self, obs) -> tuple[str, list[int]]:
        text = render_prompt(obs, self.template)
        return text, self.vocab.tokenize(text)

    def hidden(self, text: str, ids) -> Tensor:
        return self.encoder.encode_prompt(text, assemble_sequence(ids, self.ctx, self.encoder.embed_table))

    def hidden_constant(self, text: str, ids) -> np.ndarray:
        """Encoder output with no graph, memoized until the context rows change."""
        key = (self.ctx_version, text)
        vec = self._cache.get(key)
        if vec is None:
            if len(self._cache) > 50000:
                self._cache.clear()
            with no_grad():
                vec = self.hidden(text, ids).data.copy()
            self._cache[key] = vec
        return vec

    def hidden_batch(self, texts, id_lists) -> Tensor:
        """Differentiable (B, d_model) encoder outputs for many prompts.

        Prompts with the same token sequence are encoded once; distinct
        lengths are encoded as separate batches.
        """
        unique: dict[tuple, int] = {}
        owner = []
        for text, ids in zip(texts, id_lists):
            key = (text, tuple(ids))
            if key not in unique:
                unique[key] = len(unique)
            owner.append(unique[key])
        keys = list(unique)
        external = [self.encoder.lookup(text) for text, _ in keys]
        by_len: dict[int, list[int]] = {}
        for j, (text, ids) in enumerate(keys):
            if external[j] is None:
                by_len.setdefault(len(ids), []).append(j)
        pieces, order = [], []
        for j, vec in enumerate(external):
            if vec is not None:
                pieces.append(Tensor(vec[None, :]))
                order.append(j)
        for length in sorted(by_len):
            members = by_len[length]
            ids = np.array([keys[j][1] for j in members], dtype=np.int64)
            seq = assemble_batch(ids, self.ctx, self.encoder.embed_table)
            pieces.append(self.encoder.encode(seq))
            order.extend(members)
        stacked = concat(pieces, axis=0)
        position = np.empty(len(keys), dtype=np.int64)
        position[np.array(order)] = np.arange(len(order))
        return take_rows(stacked, position[np.array(owner)])

    def fuse(self, features, h) -> Tensor:
        """concat(F_c2(h), F_c1(s)); works on single vectors or batches."""
        features = features if isinstance(features, Tensor) else Tensor(features)
        h = h if isinstance(h, Tensor) else Tensor(h)
        if features.shape[-1] != self.f_c1.in_dim:
            raise ValueError(f"state width {features.shape[-1]} != {self.f_c1.in_dim}")
        if h.shape[-1] != self.f_c2.in_dim:
            raise ValueError(f"hidden width {h.shape[-1]} != {self.f_c2.in_dim}")
        return concat([self.f_c2(h), self.f_c1(features)], axis=-1)

    def represent(self, obs) -> tuple[np.ndarray, str, list[int]]:
        """Graph-free fused state for acting, plus the prompt that produced it."""
        text, ids = self.prompt(obs)
        h = self.hidden_constant(text, ids)
        with no_grad():
            fused = self.fuse(obs.features, h).data.copy()
        return fused, text, ids

    def bump_ctx_version(self) -> None:
        self.ctx_version += 1
        self._cache.clear()
