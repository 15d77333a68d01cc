"""Run configuration: a flat, human-readable ``section.key = value`` file.

Every tunable the command-line tools consume appears here with its library
default, grouped by dotted section prefix. Blank lines and ``#`` comments
are ignored; values are coerced to the declared field type (int, float,
bool, or a comma-separated tuple). Unknown keys and malformed values raise
:class:`ConfigError`, which the CLI maps to exit code 2.

The adversarial loss weight is carried here even though the corresponding
term is a stub that always contributes zero; the knob stays visible so the
composed objective keeps its full shape.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace

__all__ = [
    "ConfigError",
    "DataSection",
    "CodebookSection",
    "LangaeSection",
    "DenoiserSection",
    "EvalSection",
    "BenchSection",
    "Config",
    "default_config",
    "parse_config",
    "format_config",
    "read_config",
    "write_config",
]


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration input."""


@dataclass(frozen=True)
class DataSection:
    """Synthetic phantom generation (``gen-data``)."""

    count: int = 512
    size: int = 256
    dose: float = 0.25

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"data.count must be positive, got {self.count}")
        if not 64 <= self.size <= 512:
            raise ConfigError(f"data.size must lie in [64, 512], got {self.size}")
        if not 0.0 < self.dose <= 1.0:
            raise ConfigError(f"data.dose must lie in (0, 1], got {self.dose}")


@dataclass(frozen=True)
class CodebookSection:
    """Frozen language codebook and token-pyramid layout."""

    vocab_size: int = 4096
    dim: int = 32
    seed: int = 7
    thresholds: tuple[float, ...] = (0.95, 0.9, 0.8)

    def validate(self) -> None:
        if self.vocab_size < 1 or self.dim < 1:
            raise ConfigError("codebook.vocab_size and codebook.dim must be positive")
        if any(not -1.0 <= t <= 1.0 for t in self.thresholds):
            raise ConfigError(
                f"codebook.thresholds must lie in [-1, 1], got {self.thresholds}"
            )


@dataclass(frozen=True)
class LangaeSection:
    """Autoencoder training (``train-langae``)."""

    steps: int = 2000
    batch_size: int = 2
    base_lr: float = 1e-4
    floor_lr: float = 1e-6
    widths: tuple[int, ...] = (32, 48, 64, 64)
    semantic_weight: float = 0.3
    commit_weight: float = 0.3
    adversarial_weight: float = 0.1  # term is a stub returning zero
    perceptual_weight: float = 0.1

    def validate(self) -> None:
        _check_training(self, "langae")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"langae.widths needs four positive ints, got {self.widths}")


@dataclass(frozen=True)
class DenoiserSection:
    """Denoiser training (``train-denoiser``)."""

    steps: int = 2000
    batch_size: int = 2
    base_lr: float = 1e-4
    floor_lr: float = 1e-6
    warmup: int = 0
    langda_weight: float = 0.3
    state_size: int = 8
    step_size: int = 2
    expand: int = 2
    reduction: int = 8
    head_gain: float = 1.0
    holdout_fraction: float = 0.2
    eval_every: int = 100
    eval_limit: int = 8

    def validate(self) -> None:
        _check_training(self, "denoiser")
        if not 0 <= self.warmup < self.steps:
            raise ConfigError(
                f"denoiser.warmup must lie in [0, steps), got {self.warmup}"
            )
        for name in ("state_size", "step_size", "expand", "reduction",
                     "eval_every", "eval_limit"):
            if getattr(self, name) < 1:
                raise ConfigError(f"denoiser.{name} must be positive")
        if self.head_gain <= 0.0:
            raise ConfigError(f"denoiser.head_gain must be positive, got {self.head_gain}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(
                f"denoiser.holdout_fraction must lie in (0, 1), got {self.holdout_fraction}"
            )


@dataclass(frozen=True)
class EvalSection:
    """Metric window for ``eval`` (HU)."""

    window_lo: float = -160.0
    window_hi: float = 240.0

    def validate(self) -> None:
        if self.window_lo >= self.window_hi:
            raise ConfigError(
                f"eval window must satisfy lo < hi, got [{self.window_lo}, {self.window_hi}]"
            )


@dataclass(frozen=True)
class BenchSection:
    """Scan benchmark grid (``bench-scan``)."""

    sizes: tuple[int, ...] = (4096, 16384, 65536, 262144)
    step: int = 2
    channels: int = 8
    state_size: int = 8
    trials: int = 3

    def validate(self) -> None:
        if not self.sizes or any(n < 1 for n in self.sizes):
            raise ConfigError(f"bench.sizes must be positive, got {self.sizes}")
        for name in ("step", "channels", "state_size", "trials"):
            if getattr(self, name) < 1:
                raise ConfigError(f"bench.{name} must be positive")


def _check_training(section, prefix: str) -> None:
    if section.steps < 1:
        raise ConfigError(f"{prefix}.steps must be positive, got {section.steps}")
    if section.batch_size < 1:
        raise ConfigError(f"{prefix}.batch_size must be positive")
    if section.base_lr <= 0.0 or section.floor_lr <= 0.0:
        raise ConfigError(f"{prefix} learning rates must be positive")
    if section.floor_lr > section.base_lr:
        raise ConfigError(
            f"{prefix}.floor_lr {section.floor_lr} above base_lr {section.base_lr}"
        )


@dataclass(frozen=True)
class Config:
    data: DataSection = field(default_factory=DataSection)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    langae: LangaeSection = field(default_factory=LangaeSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def validate(self) -> "Config":
        for f in fields(self):
            getattr(self, f.name).validate()
        return self

    def grid(self) -> int:
        """Latent grid side implied by the image size (8x downsampling)."""
        if self.data.size % 8 != 0:
            raise ConfigError(f"data.size must be divisible by 8, got {self.data.size}")
        return self.data.size // 8


def default_config() -> Config:
    return Config()


# -- text round-trip ---------------------------------------------------------

def _coerce(raw: str, kind, key: str):
    raw = raw.strip()
    origin = typing.get_origin(kind)
    try:
        if origin is tuple:
            elem = typing.get_args(kind)[0]
            parts = [p for p in (s.strip() for s in raw.split(",")) if p]
            if not parts:
                raise ValueError("empty tuple")
            return tuple(elem(p) for p in parts)
        if kind is bool:
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError("expected true/false")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``section.key = value`` lines over ``base`` (library defaults)."""
    cfg = base if base is not None else default_config()
    hints = {f.name: typing.get_type_hints(type(getattr(cfg, f.name)))
             for f in fields(cfg)}
    updates: dict[str, dict[str, object]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key must be 'section.key', got {key!r}")
        section, name = key.split(".")
        if section not in hints or name not in hints[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates.setdefault(section, {})[name] = _coerce(raw, hints[section][name], key)
    for section, kv in updates.items():
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **kv)})
    cfg.validate()
    return cfg


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: Config) -> str:
    """Render a config as text that :func:`parse_config` reads back equal."""
    lines = ["# langct run configuration"]
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        assert is_dataclass(section)
        doc = (type(section).__doc__ or "").strip().splitlines()[0]
        lines.append("")
        lines.append(f"# {doc}")
        for sf in fields(section):
            lines.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"


def read_config(path: str, base: Config | None = None) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    return parse_config(text, base)


def write_config(path: str, cfg: Config) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
