"""Parameter, memory and communication accounting for GPT-style models.

Per-layer counts follow the usual GPT-2 bookkeeping::

    N_attn = 4 d_attn d_model + 3 d_attn + d_model     (Q/K/V/out weights, Q/K/V biases, out bias)
    N_ffn  = 2 d_ffn d_model + d_ffn + d_model
    N_ln   = 2 d_model                                  (one layernorm: gain + bias)

where ``d_attn = alpha * H * d_head`` and ``d_ffn = beta * d_inner``. A layer
holds two layernorms and the stack ends with a final one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from ..config import ModelConfig, SubnetSpec, as_layer_list

BYTES_PER_PARAM = 4

PRESETS: dict[str, ModelConfig] = {
    "gpt2-small": ModelConfig(L=12, d_model=768, H=12, d_head=64, d_inner=3072, R=12,
                              vocab=50257, context=1024, shared_layers=(), activation="gelu"),
    "gpt2-medium": ModelConfig(L=24, d_model=1024, H=16, d_head=64, d_inner=4096, R=16,
                               vocab=50257, context=1024, shared_layers=(), activation="gelu"),
    "gpt2-large": ModelConfig(L=36, d_model=1280, H=20, d_head=64, d_inner=5120, R=20,
                              vocab=50257, context=1024, shared_layers=(), activation="gelu"),
    "gpt2-xl": ModelConfig(L=48, d_model=1600, H=25, d_head=64, d_inner=6400, R=25,
                           vocab=50257, context=1024, shared_layers=(), activation="gelu"),
    "desk": ModelConfig(),
}
GPT2_FAMILY = ("gpt2-small", "gpt2-medium", "gpt2-large", "gpt2-xl")


class InvalidSparsityError(ValueError):
    pass


def n_attn(d_attn: int, d_model: int) -> int:
    return 4 * d_attn * d_model + 3 * d_attn + d_model


def n_ffn(d_ffn: int, d_model: int) -> int:
    return 2 * d_ffn * d_model + d_ffn + d_model


def n_ln(d_model: int) -> int:
    return 2 * d_model


@dataclass
class CostReport:
    N_embd: int
    N_pos: int
    N_ln: int
    N_attn: list[int]
    N_ffn: list[int]
    N_layer: list[int]
    N_final_ln: int
    N_proj: int
    include_positional: bool = True
    bytes_per_param: int = BYTES_PER_PARAM
    N_model: int = field(init=False)

    def __post_init__(self):
        self.N_model = (self.N_embd + sum(self.N_layer) + self.N_final_ln + self.N_proj
                        + (self.N_pos if self.include_positional else 0))

    @property
    def memory_bytes(self) -> int:
        return self.N_model * self.bytes_per_param

    @property
    def train_memory_bytes(self) -> int:
        # weights, gradients and two Adam moments
        return 4 * self.memory_bytes

    def comm_bytes(self, rounds: int, workers: int = 1) -> int:
        return 2 * rounds * workers * self.memory_bytes

    def rows(self) -> list[tuple[str, int]]:
        out = [("N_embd", self.N_embd), ("N_pos", self.N_pos), ("N_ln", self.N_ln)]
        for l, (a, f, t) in enumerate(zip(self.N_attn, self.N_ffn, self.N_layer)):
            out += [(f"N_attn[{l}]", a), (f"N_ffn[{l}]", f), (f"N_layer[{l}]", t)]
        out += [("N_final_ln", self.N_final_ln), ("N_proj", self.N_proj),
                ("N_model", self.N_model), ("memory_bytes", self.memory_bytes)]
        return out


def _width(frac, n_blocks: int, block: int, what: str, layer: int) -> int:
    f = Fraction(frac).limit_denominator(100_000) if not isinstance(frac, Fraction) else frac
    if not 0 < f <= 1:
        raise InvalidSparsityError(f"{what} sparsity {frac} for layer {layer} not in (0, 1]")
    k = f * n_blocks
    if k.denominator != 1:
        raise InvalidSparsityError(
            f"{what} sparsity {frac} for layer {layer} keeps {float(k)} of {n_blocks} blocks")
    return int(k) * block


def count_params(config: ModelConfig, alpha=1, beta=1, include_positional: bool = True,
                 n_labels: int | None = None, bytes_per_param: int = BYTES_PER_PARAM) -> CostReport:
    """Parameter counts with per-layer attention (``alpha``) and FFN (``beta``) sparsity."""
    c = config
    alphas = as_layer_list(alpha, c.L)
    betas = as_layer_list(beta, c.L)
    attn, ffn, layer = [], [], []
    for l in range(c.L):
        a = n_attn(_width(alphas[l], c.H, c.d_head, "attention", l), c.d_model)
        f = n_ffn(_width(betas[l], c.R, c.ffn_block, "ffn", l), c.d_model)
        attn.append(a)
        ffn.append(f)
        layer.append(2 * n_ln(c.d_model) + a + f)
    if n_labels is not None:
        proj = c.d_model * n_labels
    else:
        proj = 0 if c.tie_projection else c.d_model * c.vocab
    return CostReport(N_embd=c.vocab * c.d_model, N_pos=c.context * c.d_model,
                      N_ln=n_ln(c.d_model), N_attn=attn, N_ffn=ffn, N_layer=layer,
                      N_final_ln=n_ln(c.d_model), N_proj=proj,
                      include_positional=include_positional, bytes_per_param=bytes_per_param)


def subnet_param_count(config: ModelConfig, spec: SubnetSpec) -> int:
    return count_params(config, spec.alphas(config), spec.betas(config)).N_model


def half_block_sparsity(config: ModelConfig, fraction=Fraction(1, 2)) -> tuple[list, list]:
    """Per-layer (alpha, beta) keeping floor(fraction * N) blocks on partitioned layers."""
    fr = Fraction(fraction)
    alphas, betas = [], []
    for l in range(config.L):
        if l in config.shared_layers:
            alphas.append(Fraction(1))
            betas.append(Fraction(1))
        else:
            alphas.append(Fraction(max(1, math.floor(fr * config.H)), config.H))
            betas.append(Fraction(max(1, math.floor(fr * config.R)), config.R))
    return alphas, betas


def memory_ratio(n_shared: int, n_partitionable: int, fraction) -> float:
    """Subnet/full size when only the partitionable part shrinks by ``fraction``."""
    total = n_shared + n_partitionable
    return float((n_shared + Fraction(fraction) * n_partitionable) / total)


def memory_ratio_curve(configs: Iterable[tuple[str, ModelConfig]], fraction=Fraction(1, 2),
                       include_positional: bool = True) -> list[dict]:
    rows = []
    for name, cfg in configs:
        full = count_params(cfg, include_positional=include_positional).N_model
        a, b = half_block_sparsity(cfg, fraction)
        sub = count_params(cfg, a, b, include_positional=include_positional).N_model
        rows.append({"model": name, "n_full": full, "n_sub": sub, "ratio": sub / full,
                     "positional": include_positional})
    return rows


def comm_volume(config: ModelConfig, schedule: Sequence[Sequence[SubnetSpec]],
                bytes_per_param: int = BYTES_PER_PARAM) -> int:
    """Bytes moved when every worker's subnet is sent out and back each round."""
    total = 0
    for round_specs in schedule:
        for spec in round_specs:
            total += bytes_per_param * subnet_param_count(config, spec)
    return 2 * total
