"""Architecture and subnet descriptors shared by every module."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

SCOPES = ("attn", "ffn", "both")
MODES = ("masked", "physical")


class ConfigError(ValueError):
    pass


class InvalidSpecError(ValueError):
    pass


class InvalidRatioError(ValueError):
    pass


def parse_ratio(value) -> Fraction:
    """Accept ``"6/12"``, ``0.5``, ``Fraction`` or ``"0.5"``; return an exact fraction."""
    if isinstance(value, Fraction):
        r = value
    elif isinstance(value, str):
        text = value.strip()
        if "/" in text:
            num, den = text.split("/", 1)
            r = Fraction(int(num), int(den))
        else:
            r = Fraction(text).limit_denominator(10_000)
    else:
        r = Fraction(value).limit_denominator(10_000)
    if not 0 < r <= 1:
        raise InvalidRatioError(f"ratio must lie in (0, 1], got {value!r}")
    return r


def kept_count(ratio, n_full: int) -> int:
    """Blocks kept for ``ratio`` of ``n_full``, rounding half up."""
    r = parse_ratio(ratio)
    return math.floor(r * n_full + Fraction(1, 2))


def format_ratio(ratio) -> str:
    r = parse_ratio(ratio)
    return f"{r.numerator}/{r.denominator}"


@dataclass(frozen=True)
class ModelConfig:
    L: int = 8
    d_model: int = 128
    H: int = 8
    d_head: int = 16
    d_inner: int = 512
    R: int = 8
    vocab: int = 256
    context: int = 128
    shared_layers: tuple[int, ...] = (0, 1, 6, 7)
    activation: str = "relu"
    tie_projection: bool = True
    scale_correction: bool = True

    def __post_init__(self):
        object.__setattr__(self, "shared_layers", tuple(sorted(set(int(i) for i in self.shared_layers))))
        for name in ("L", "d_model", "H", "d_head", "d_inner", "R", "vocab", "context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_inner % self.R:
            raise ConfigError(f"d_inner={self.d_inner} is not divisible by R={self.R}")
        if any(not 0 <= i < self.L for i in self.shared_layers):
            raise ConfigError(f"shared_layers {self.shared_layers} outside 0..{self.L - 1}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def d_attn(self) -> int:
        return self.H * self.d_head

    @property
    def ffn_block(self) -> int:
        return self.d_inner // self.R

    @property
    def partitioned_layers(self) -> tuple[int, ...]:
        return tuple(l for l in range(self.L) if l not in self.shared_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shared_layers"] = list(self.shared_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "shared_layers" in known:
            known["shared_layers"] = tuple(known["shared_layers"])
        return cls(**known)

    def replace(self, **changes) -> ModelConfig:
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


@dataclass(frozen=True)
class SubnetSpec:
    """Per-layer kept blocks for one worker or one deployment subnet.

    ``attn[l]`` lists kept heads of layer ``l`` and ``ffn[l]`` kept FFN chunks;
    shared layers and out-of-scope sublayers keep everything.
    """
    attn: tuple[tuple[int, ...], ...]
    ffn: tuple[tuple[int, ...], ...]
    mode: str = "masked"
    scope: str = "both"
    scale_correction: bool = True

    def __post_init__(self):
        object.__setattr__(self, "attn", tuple(tuple(sorted(int(i) for i in row)) for row in self.attn))
        object.__setattr__(self, "ffn", tuple(tuple(sorted(int(i) for i in row)) for row in self.ffn))
        if self.mode not in MODES:
            raise InvalidSpecError(f"unknown mode {self.mode!r}")
        if self.scope not in SCOPES:
            raise InvalidSpecError(f"unknown scope {self.scope!r}")

    @classmethod
    def full(cls, config: ModelConfig, mode: str = "masked", scope: str = "both") -> SubnetSpec:
        return cls(attn=tuple(tuple(range(config.H)) for _ in range(config.L)),
                   ffn=tuple(tuple(range(config.R)) for _ in range(config.L)),
                   mode=mode, scope=scope, scale_correction=config.scale_correction)

    def validate(self, config: ModelConfig) -> None:
        if len(self.attn) != config.L or len(self.ffn) != config.L:
            raise InvalidSpecError("spec layer count does not match config")
        for l in range(config.L):
            for kind, row, n in (("attn", self.attn[l], config.H), ("ffn", self.ffn[l], config.R)):
                if not row:
                    raise InvalidSpecError(f"layer {l} keeps no {kind} blocks")
                if len(set(row)) != len(row) or row[0] < 0 or row[-1] >= n:
                    raise InvalidSpecError(f"layer {l} {kind} blocks {row} invalid for {n} blocks")
                if l in config.shared_layers and len(row) != n:
                    raise InvalidSpecError(f"shared layer {l} must keep every {kind} block")

    def is_full(self, config: ModelConfig) -> bool:
        return (all(len(r) == config.H for r in self.attn)
                and all(len(r) == config.R for r in self.ffn))

    def alphas(self, config: ModelConfig) -> list[Fraction]:
        return [Fraction(len(r), config.H) for r in self.attn]

    def betas(self, config: ModelConfig) -> list[Fraction]:
        return [Fraction(len(r), config.R) for r in self.ffn]

    def with_mode(self, mode: str) -> SubnetSpec:
        return SubnetSpec(self.attn, self.ffn, mode, self.scope, self.scale_correction)

    def to_dict(self) -> dict:
        return {"attn": [list(r) for r in self.attn], "ffn": [list(r) for r in self.ffn],
                "mode": self.mode, "scope": self.scope,
                "scale_correction": self.scale_correction}

    @classmethod
    def from_dict(cls, d: dict) -> SubnetSpec:
        return cls(attn=tuple(tuple(r) for r in d["attn"]), ffn=tuple(tuple(r) for r in d["ffn"]),
                   mode=d.get("mode", "masked"), scope=d.get("scope", "both"),
                   scale_correction=d.get("scale_correction", True))


def scope_parts(scope: str) -> tuple[bool, bool]:
    """(partitions attention, partitions ffn) for a scope name."""
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}")
    return scope in ("attn", "both"), scope in ("ffn", "both")


def as_layer_list(value, n: int) -> list:
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ConfigError(f"expected {n} per-layer values, got {len(value)}")
        return list(value)
    return [value] * n

