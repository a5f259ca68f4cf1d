"""Informal text prompts, a closed-vocabulary tokenizer and learnable context rows."""
from __future__ import annotations

import re
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Tensor, concat, parameter, take_rows

DEFAULT_TEMPLATE = "Slice {slice} has a QoS level of {qos:.2f} and a throughput of {throughput:.2f} Mbps."
SLOTS = ("slice", "qos", "throughput")

_TOKEN_RE = re.compile(r"[a-z]+|\d|[^\sa-z\d]")


@dataclass(frozen=True)
class PromptTemplate:
    """One sentence per slice; slots use ``str.format`` syntax.

    Available slots: ``{slice}`` (1-based id), ``{qos}`` (normalized QoS
    level) and ``{throughput}`` (mean UE rate in Mbps). Every float slot
    must carry a fixed precision, e.g. ``{qos:.2f}``.
    """

    sentence: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        fields = [f for _, f, spec, _ in string.Formatter().parse(self.sentence) if f is not None]
        unknown = set(fields) - set(SLOTS)
        if unknown:
            raise ValueError(f"unknown template slots: {sorted(unknown)}")
        for _, f, spec, _ in string.Formatter().parse(self.sentence):
            if f in ("qos", "throughput") and not re.fullmatch(r"\.\d+f", spec or ""):
                raise ValueError(f"slot {{{f}}} needs a fixed precision such as ':.2f'")

    @classmethod
    def from_file(cls, path) -> "PromptTemplate":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if len(lines) != 1:
            raise ValueError(f"{path}: expected exactly one template line")
        return cls(lines[0])

    def render(self, slice_id: int, qos: float, throughput_mbps: float) -> str:
        return self.sentence.format(slice=slice_id, qos=qos, throughput=throughput_mbps)


def render_prompt(obs, template: PromptTemplate | None = None) -> str:
    template = template or PromptTemplate()
    sentences = [
        template.render(l + 1, float(q), float(c) / 1e6)
        for l, (q, c) in enumerate(zip(obs.qos_level, obs.throughput))
    ]
    return " ".join(sentences)


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class TokenVocab:
    UNK = "<unk>"

    def __init__(self, tokens):
        self.tokens = [self.UNK] + [t for t in tokens if t != self.UNK]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_templates(cls, templates) -> "TokenVocab":
        words = set(string.digits) | set(".,:;-+%()")
        for tpl in templates:
            text = tpl.sentence if isinstance(tpl, PromptTemplate) else str(tpl)
            literal = "".join(lit for lit, *_ in string.Formatter().parse(text))
            words.update(split_tokens(literal))
        return cls(sorted(words))

    @classmethod
    def load(cls, path) -> "TokenVocab":
        return cls(Path(path).read_text().split("\n")[1:-1])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        return [self.index.get(t, 0) for t in split_tokens(text)]

    def detokenize(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)


class ContextTokens:
    """Learnable prompt rows prepended to every encoder input."""

    def __init__(self, n_ctx: int, d_model: int, rng: np.random.Generator, std: float = 0.02):
        if n_ctx < 0:
            raise ValueError("n_ctx must be non-negative")
        self.embeddings = parameter(rng.normal(0.0, std, size=(n_ctx, d_model)), name="ctx")

    @property
    def n_ctx(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d_model(self) -> int:
        return self.embeddings.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.embeddings] if self.n_ctx else []


def assemble_sequence(ids, ctx: ContextTokens | None, embed_table: Tensor) -> Tensor:
    """[context rows] ++ [embedding of each id]; shape (n_ctx + len(ids), d_model)."""
    if ctx is not None and ctx.d_model != embed_table.shape[1]:
        raise ValueError(f"context width {ctx.d_model} != embedding width {embed_table.shape[1]}")
    tokens = take_rows(embed_table, np.asarray(ids, dtype=np.int64).reshape(-1))
    if ctx is None or ctx.n_ctx == 0:
        return tokens
    return concat([ctx.embeddings, tokens], axis=0)


def assemble_batch(id_matrix, ctx: ContextTokens | None, embed_table: Tensor) -> Tensor:
    """Batched :func:`assemble_sequence` for equal-length prompts: (B, n_ctx + T, d)."""
    id_matrix = np.asarray(id_matrix, dtype=np.int64)
    if id_matrix.ndim != 2:
        raise ValueError("id_matrix must be 2-D (batch, length)")
    if ctx is not None and ctx.d_model != embed_table.shape[1]:
        raise ValueError(f"context width {ctx.d_model} != embedding width {embed_table.shape[1]}")
    tokens = take_rows(embed_table, id_matrix)
    if ctx is None or ctx.n_ctx == 0:
        return tokens
    prefix = ctx.embeddings * np.ones((id_matrix.shape[0], 1, 1))
    return concat([prefix, tokens], axis=1)
