"""Run configuration: an INI file validated against a fixed schema.

Sections and keys (all optional unless marked *required*):

``[run]``      variant, seeds (comma list), out, env (slicing | stationary_toy |
               semantic_toy)
``[cell]``     bandwidth, rb_bandwidth, subcarrier_spacing, tx_power_dbm,
               noise_psd_dbm_hz, penalty_lambda, seed, cell_size,
               pathloss_exponent, reference_loss_db, packet_bits, max_latency,
               min_rate, epoch
``[slice.N]``  kind *required*, threshold *required*, n_users *required*,
               weight, rate_threshold, q_min, slack (one section per slice,
               N = 1, 2, ...; slicing env only)
``[reward]``   alpha, delta, margin
``[sac]``      gamma, beta, batch_size, buffer_capacity, actor_lr, critic_lr,
               ctx_lr, hidden (comma list), use_target, polyak, literal_target
``[train]``    iterations, n_actors, eval_episodes, steps_per_iteration,
               episode_length, updates_per_iteration, warmup_steps,
               eval_interval, convergence_window, convergence_tol, sequential,
               terminal_at_horizon, smoothing_window
``[prompt]``   n_ctx, ctx_std, template (path to a one-line template file)
``[encoder]``  d_model, n_blocks, d_ff, seed, alt_seed, d_f, adapter_hidden,
               external_embeddings (path), pretrain_pairs, pretrain_epochs,
               pretrain_batch, pretrain_lr, std_floor
``[toy]``      n_rbs, n_ues, kind, threshold_ratio, high, low, nuisance_mbps
"""
from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .env import SLICE_KINDS, CellConfig, RewardConfig, SliceSpec
from .marl import TrainLoopConfig
from .sac import SacConfig

VARIANTS = ("pa-mrl", "pa-mrl-alt-encoder", "marl-noprompt")
ENV_KINDS = ("slicing", "stationary_toy", "semantic_toy")


class ConfigError(ValueError):
    pass


@dataclass
class PromptConfig:
    n_ctx: int = 4
    ctx_std: float = 0.02
    template: str = ""


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_blocks: int = 2
    d_ff: int = 128
    seed: int = 0
    alt_seed: int = 1
    d_f: int = 32
    adapter_hidden: int = 64
    external_embeddings: str = ""
    pretrain_pairs: int = 1024
    pretrain_epochs: int = 50
    pretrain_batch: int = 128
    pretrain_lr: float = 1e-3
    std_floor: float = 0.5


@dataclass
class ToyConfig:
    n_rbs: int = 4
    n_ues: int = 2
    kind: str = "eMBB"
    threshold_ratio: float = 0.8
    high: float = 0.625
    low: float = 0.125
    nuisance_mbps: float = 100.0


@dataclass
class RunConfig:
    variant: str = "pa-mrl"
    seeds: tuple = (1, 2, 3, 4, 5)
    out: str = "runs"
    env: str = "slicing"
    cell: CellConfig = field(default_factory=CellConfig)
    slices: list = field(default_factory=list)
    reward: RewardConfig = field(default_factory=RewardConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    train: TrainLoopConfig = field(default_factory=TrainLoopConfig)
    smoothing_window: int = 50
    prompt: PromptConfig = field(default_factory=PromptConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    base_dir: str = "."

    # -- variant handling -----------------------------------------------------
    @property
    def n_ctx(self) -> int:
        return 0 if self.variant == "marl-noprompt" else self.prompt.n_ctx

    @property
    def encoder_seed(self) -> int:
        return self.encoder.alt_seed if self.variant == "pa-mrl-alt-encoder" else self.encoder.seed

    @property
    def external_embeddings(self) -> str:
        return self.encoder.external_embeddings if self.variant == "pa-mrl-alt-encoder" else ""

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_overrides(self, seeds=None, variant=None, n_ctx=None, episodes=None, out=None,
                       sequential=None) -> "RunConfig":
        cfg = dataclasses.replace(
            self,
            prompt=dataclasses.replace(self.prompt),
            train=dataclasses.replace(self.train),
        )
        if seeds is not None:
            cfg.seeds = tuple(int(s) for s in seeds)
        if variant is not None:
            if variant not in VARIANTS:
                raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
            cfg.variant = variant
        if n_ctx is not None:
            if n_ctx < 0:
                raise ConfigError("n_ctx must be non-negative")
            cfg.prompt.n_ctx = int(n_ctx)
        if episodes is not None:
            cfg.train.iterations = int(episodes)
        if out is not None:
            cfg.out = str(out)
        if sequential:
            cfg.train.sequential = True
        if cfg.variant == "marl-noprompt":
            cfg.prompt.n_ctx = 0
        cfg.train.train_context = cfg.n_ctx > 0
        return cfg

    def slice_kinds(self) -> tuple:
        if self.env == "slicing":
            return tuple(s.kind for s in self.slices)
        if self.env == "stationary_toy":
            return (self.toy.kind,)
        return ("eMBB", "eMBB")

    # -- snapshot -------------------------------------------------------------
    def snapshot(self, seed: int | None = None) -> str:
        """The effective configuration in the input INI format."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        seeds = self.seeds if seed is None else (seed,)
        cp["run"] = {"variant": self.variant, "seeds": ",".join(str(s) for s in seeds),
                     "out": self.out, "env": self.env}
        cp["cell"] = _fmt_section(self.cell, skip=("n_dus",))
        for s in self.slices:
            cp[f"slice.{s.slice_id}"] = _fmt_section(s, skip=("slice_id",))
        cp["reward"] = _fmt_section(self.reward)
        cp["sac"] = _fmt_section(self.sac)
        train = _fmt_section(self.train, skip=("seed", "train_context"))
        train["smoothing_window"] = str(self.smoothing_window)
        cp["train"] = train
        cp["prompt"] = _fmt_section(self.prompt)
        if self.prompt.template:
            cp["prompt"]["template"] = str(self.resolve(self.prompt.template).resolve())
        cp["encoder"] = _fmt_section(self.encoder)
        if self.encoder.external_embeddings:
            cp["encoder"]["external_embeddings"] = str(
                self.resolve(self.encoder.external_embeddings).resolve()
            )
        cp["toy"] = _fmt_section(self.toy)
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            for k, v in cp[sec].items():
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


def _fmt_section(obj, skip=()) -> dict:
    return {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}


# ---------------------------------------------------------------------------
# Parsing


_SECTION_TYPES = {
    "cell": CellConfig,
    "reward": RewardConfig,
    "sac": SacConfig,
    "train": TrainLoopConfig,
    "prompt": PromptConfig,
    "encoder": EncoderConfig,
    "toy": ToyConfig,
}
_SECTION_SKIP = {"cell": {"n_dus"}, "train": {"seed", "train_context"}}
_SECTION_EXTRA = {"train": {"smoothing_window": int}}
_RUN_KEYS = {"variant", "seeds", "out", "env"}
_SLICE_REQUIRED = ("kind", "threshold", "n_users")
_SLICE_OPTIONAL = {"weight": float, "rate_threshold": float, "q_min": float, "slack": float}


def _line_index(text: str) -> dict:
    """(section, key) -> line number, and (section, None) -> header line."""
    where = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = n
            continue
        m = re.match(r"([^=:]+)[=:]", line)
        if m and section is not None:
            where[(section, m.group(1).strip())] = n
    return where


def _convert(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _field_types(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        t = t.split("|")[0].strip()
        out[f.name] = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(t, str)
    return out


def parse_config(text: str, source: str = "<config>", base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    lines = _line_index(text)

    def loc(section, key=None):
        n = lines.get((section, key)) or lines.get((section, None))
        return f"{source}:{n}" if n else source

    cfg = RunConfig(base_dir=base_dir)
    sections = {}
    slice_sections = []
    for sec in cp.sections():
        if sec == "run" or sec in _SECTION_TYPES:
            sections[sec] = cp[sec]
        elif re.fullmatch(r"slice\.\d+", sec):
            slice_sections.append(sec)
        else:
            raise ConfigError(f"{loc(sec)}: unknown section [{sec}]")

    if "run" in sections:
        for key, raw in sections["run"].items():
            if key not in _RUN_KEYS:
                raise ConfigError(f"{loc('run', key)}: unknown key '{key}' in [run]")
        run = sections["run"]
        cfg.variant = run.get("variant", cfg.variant).strip()
        if cfg.variant not in VARIANTS:
            raise ConfigError(f"{loc('run', 'variant')}: unknown variant {cfg.variant!r}")
        if "seeds" in run:
            cfg.seeds = _convert(run["seeds"], tuple, loc("run", "seeds"))
            if not cfg.seeds:
                raise ConfigError(f"{loc('run', 'seeds')}: seed list is empty")
        cfg.out = run.get("out", cfg.out).strip()
        cfg.env = run.get("env", cfg.env).strip()
        if cfg.env not in ENV_KINDS:
            raise ConfigError(f"{loc('run', 'env')}: unknown env {cfg.env!r}")

    for name, cls in _SECTION_TYPES.items():
        types = _field_types(cls)
        skip = _SECTION_SKIP.get(name, set())
        extra = _SECTION_EXTRA.get(name, {})
        kwargs = {}
        if name in sections:
            for key, raw in sections[name].items():
                if key in extra:
                    setattr(cfg, key, _convert(raw, extra[key], loc(name, key)))
                    continue
                if key not in types or key in skip:
                    raise ConfigError(f"{loc(name, key)}: unknown key '{key}' in [{name}]")
                kwargs[key] = _convert(raw, types[key], loc(name, key))
        try:
            setattr(cfg, name, cls(**kwargs))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{loc(name)}: [{name}] {exc}") from None

    slices = []
    for sec in sorted(slice_sections, key=lambda s: int(s.split(".")[1])):
        body = cp[sec]
        sid = int(sec.split(".")[1])
        for key in body:
            if key not in _SLICE_REQUIRED and key not in _SLICE_OPTIONAL:
                raise ConfigError(f"{loc(sec, key)}: unknown key '{key}' in [{sec}]")
        for key in _SLICE_REQUIRED:
            if key not in body:
                raise ConfigError(f"{loc(sec)}: [{sec}] is missing required field '{key}'")
        kind = body["kind"].strip()
        if kind not in SLICE_KINDS:
            raise ConfigError(f"{loc(sec, 'kind')}: unknown slice kind {kind!r}")
        kw = {k: _convert(body[k], t, loc(sec, k)) for k, t in _SLICE_OPTIONAL.items() if k in body and body[k].strip()}
        try:
            slices.append(
                SliceSpec(
                    slice_id=sid,
                    kind=kind,
                    threshold=_convert(body["threshold"], float, loc(sec, "threshold")),
                    n_users=_convert(body["n_users"], int, loc(sec, "n_users")),
                    **kw,
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{loc(sec)}: {exc}") from None
    cfg.slices = slices
    if cfg.env == "slicing" and not slices:
        raise ConfigError(f"{source}: the slicing env needs at least one [slice.N] section")
    if [s.slice_id for s in slices] != list(range(1, len(slices) + 1)):
        raise ConfigError(f"{source}: slice sections must be numbered 1..N without gaps")
    if cfg.toy.kind not in SLICE_KINDS:
        raise ConfigError(f"{loc('toy', 'kind')}: unknown slice kind {cfg.toy.kind!r}")
    cfg.cell = dataclasses.replace(cfg.cell, n_dus=cfg.train.n_actors)
    cfg.train.train_context = cfg.n_ctx > 0
    if cfg.variant == "marl-noprompt":
        cfg.prompt.n_ctx = 0
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    return parse_config(path.read_text(), source=str(path), base_dir=str(path.parent))
