"""Pre-layernorm GPT decoder whose heads and FFN chunks are addressable blocks.

Parameter names follow ``h{layer}.{sublayer}.{weight}``. A layer may be stored
at full width or physically narrowed to a subset of its blocks; the forward pass
infers the width from the tensor shapes, so the same code runs central, masked
and physically sliced models.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .config import InvalidSpecError, ModelConfig, SubnetSpec
from .tensor import Rng, Tensor

INIT_STREAM = 1
EMBED_STD = 0.02

# (suffix, axis sliced by a block)
ATTN_BLOCK_PARAMS = (("wq", 1), ("bq", 0), ("wk", 1), ("bk", 0), ("wv", 1), ("bv", 0), ("wc", 0))
FFN_BLOCK_PARAMS = (("w", 1), ("b", 0), ("c", 0))


class ParameterStore(Mapping):
    """Named float32 tensors plus the config they instantiate."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor] | None = None):
        self.config = config
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def copy(self) -> ParameterStore:
        return ParameterStore(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                            for k, v in self._tensors.items()})

    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def nbytes(self) -> int:
        return 4 * self.num_params()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self._tensors.items() if t.grad is not None}

    def layer_heads(self, layer: int) -> int:
        return self[f"h{layer}.attn.wq"].shape[1] // self.config.d_head

    def layer_ffn_blocks(self, layer: int) -> int:
        return self[f"h{layer}.ffn.w"].shape[1] // self.config.ffn_block

    def equal(self, other: ParameterStore) -> bool:
        """Bitwise equality of names, shapes and values."""
        if set(self) != set(other):
            return False
        return all(self[k].shape == other[k].shape and np.array_equal(self[k].data, other[k].data)
                   for k in self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Full-width tensor shapes in canonical (checkpoint) order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {"wte": (c.vocab, c.d_model), "wpe": (c.context, c.d_model)}
    for l in range(c.L):
        p = f"h{l}."
        shapes.update({
            p + "ln1.g": (c.d_model,), p + "ln1.b": (c.d_model,),
            p + "attn.wq": (c.d_model, c.d_attn), p + "attn.bq": (c.d_attn,),
            p + "attn.wk": (c.d_model, c.d_attn), p + "attn.bk": (c.d_attn,),
            p + "attn.wv": (c.d_model, c.d_attn), p + "attn.bv": (c.d_attn,),
            p + "attn.wc": (c.d_attn, c.d_model), p + "attn.bc": (c.d_model,),
            p + "ln2.g": (c.d_model,), p + "ln2.b": (c.d_model,),
            p + "ffn.w": (c.d_model, c.d_inner), p + "ffn.b": (c.d_inner,),
            p + "ffn.c": (c.d_inner, c.d_model), p + "ffn.bc": (c.d_model,),
        })
    shapes["lnf.g"] = (c.d_model,)
    shapes["lnf.b"] = (c.d_model,)
    if not c.tie_projection:
        shapes["proj"] = (c.d_model, c.vocab)
    return shapes


def _init_std(name: str, c: ModelConfig) -> float | None:
    """Std of the normal draw for ``name``; None means constant init."""
    suffix = name.split(".", 1)[-1]
    if name in ("wte", "wpe", "proj"):
        return EMBED_STD
    if suffix in ("attn.wq", "attn.wk", "attn.wv"):
        return math.sqrt(1.0 / c.d_model)
    if suffix == "attn.wc":
        return math.sqrt(1.0 / c.d_attn)
    if suffix == "ffn.w":
        return math.sqrt(2.0 / c.d_model)
    if suffix == "ffn.c":
        return math.sqrt(1.0 / c.d_inner)
    return None


def init_params(config: ModelConfig, rng: Rng) -> ParameterStore:
    """He-style init for layer weights; layernorm gains 1, every bias 0."""
    gen = rng.generator(INIT_STREAM)
    tensors = {}
    for name, shape in param_shapes(config).items():
        std = _init_std(name, config)
        if std is not None:
            data = gen.standard_normal(shape, dtype=np.float32) * np.float32(std)
        elif name.endswith(".g"):
            data = np.ones(shape, dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    return ParameterStore(config, tensors)


# ---------------------------------------------------------------- block layout

def block_columns(kept: Sequence[int], width: int) -> np.ndarray:
    """Element indices covered by ``kept`` blocks of ``width`` elements each."""
    kept = np.asarray(kept, dtype=np.int64)
    return (kept[:, None] * width + np.arange(width)[None, :]).reshape(-1)


def block_params(config: ModelConfig, layer: int, kind: str) -> list[tuple[str, int, int]]:
    """(param name, sliced axis, elements per block) for a layer's attn or ffn blocks."""
    if kind == "attn":
        return [(f"h{layer}.attn.{s}", axis, config.d_head) for s, axis in ATTN_BLOCK_PARAMS]
    if kind == "ffn":
        return [(f"h{layer}.ffn.{s}", axis, config.ffn_block) for s, axis in FFN_BLOCK_PARAMS]
    raise ValueError(kind)


def take_blocks(data: np.ndarray, axis: int, kept: Sequence[int], width: int) -> np.ndarray:
    return np.take(data, block_columns(kept, width), axis=axis)


# ---------------------------------------------------------------- forward

_CAUSAL: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    m = _CAUSAL.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -np.inf, dtype=np.float32), k=1)
        m.setflags(write=False)
        _CAUSAL[n] = m
    return m


def _kept_for(subnet: SubnetSpec | None, kind: str, layer: int) -> tuple[int, ...] | None:
    if subnet is None:
        return None
    return (subnet.attn if kind == "attn" else subnet.ffn)[layer]


def _sublayer_plan(params: ParameterStore, layer: int, kind: str,
                   kept: Sequence[int] | None, scale_on: bool) -> tuple[np.ndarray | None, float]:
    """Mask over stored blocks (None = keep all) and the output scale factor."""
    c = params.config
    n_full = c.H if kind == "attn" else c.R
    n_stored = params.layer_heads(layer) if kind == "attn" else params.layer_ffn_blocks(layer)
    mask = None
    if n_stored < n_full:
        if kept is not None and len(kept) != n_stored:
            raise InvalidSpecError(
                f"layer {layer} stores {n_stored} {kind} blocks but the subnet spec keeps {len(kept)}")
        n_active = n_stored
    elif kept is not None and len(kept) < n_full:
        mask = np.zeros(n_full, dtype=np.float32)
        mask[list(kept)] = 1.0
        n_active = len(kept)
    else:
        n_active = n_full
    factor = math.sqrt(n_full / n_active) if (scale_on and n_active < n_full) else 1.0
    return mask, factor


def attention_sublayer(params: ParameterStore, layer: int, x: Tensor,
                       head_mask: np.ndarray | None = None, factor: float = 1.0) -> Tensor:
    """Causal multi-head attention on already-normalized ``x`` of shape (B, N, d_model)."""
    c = params.config
    p = f"h{layer}.attn."
    B, N, _ = x.shape
    h = params.layer_heads(layer)
    dh = c.d_head

    def heads(w, b):
        y = T.linear(x, params[p + w], params[p + b])
        return T.transpose(T.reshape(y, (B, N, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    att = T.scaled_masked_softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                                  1.0 / math.sqrt(dh), _causal_mask(N))
    y = T.matmul(att, v)
    if head_mask is not None:
        y = T.mul(y, Tensor(head_mask.reshape(1, h, 1, 1)))
    y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (B, N, h * dh))
    out = T.linear(y, params[p + "wc"], params[p + "bc"])
    return T.scale(out, factor) if factor != 1.0 else out


def ffn_sublayer(params: ParameterStore, layer: int, x: Tensor,
                 block_mask: np.ndarray | None = None, factor: float = 1.0) -> Tensor:
    c = params.config
    p = f"h{layer}.ffn."
    a = T.linear(x, params[p + "w"], params[p + "b"])
    a = T.relu(a) if c.activation == "relu" else T.gelu(a)
    if block_mask is not None:
        a = T.mul(a, Tensor(np.repeat(block_mask, c.ffn_block)))
    out = T.linear(a, params[p + "c"], params[p + "bc"])
    return T.scale(out, factor) if factor != 1.0 else out


def forward(params: ParameterStore, tokens, subnet: SubnetSpec | None = None) -> Tensor:
    """Logits of shape (B, N, vocab) for integer ``tokens`` of shape (B, N) or (N,).

    With ``subnet`` over a full-width store, inactive blocks are masked; over a
    physically sliced store the stored blocks are used as-is. Either way, when
    scale correction is on, each narrowed sublayer output is multiplied by
    sqrt(N_full / N_active) before its residual add.
    """
    c = params.config
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise T.InvalidInputError("tokens must be 1-D or 2-D")
    B, N = ids.shape
    if N > c.context:
        raise T.InvalidInputError(f"sequence length {N} exceeds context {c.context}")
    if ids.size and (ids.min() < 0 or ids.max() >= c.vocab):
        raise T.InvalidInputError(f"token id outside vocabulary of {c.vocab}")
    if subnet is not None:
        subnet.validate(c)
    scale_on = subnet.scale_correction if subnet is not None else c.scale_correction

    x = T.add(T.embedding(params["wte"], ids), T.embedding(params["wpe"], np.arange(N)))
    for l in range(c.L):
        p = f"h{l}."
        mask, factor = _sublayer_plan(params, l, "attn", _kept_for(subnet, "attn", l), scale_on)
        xn = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = T.add(x, attention_sublayer(params, l, xn, mask, factor))
        mask, factor = _sublayer_plan(params, l, "ffn", _kept_for(subnet, "ffn", l), scale_on)
        xn = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        x = T.add(x, ffn_sublayer(params, l, xn, mask, factor))
    x = T.layer_norm(x, params["lnf.g"], params["lnf.b"])
    if c.tie_projection:
        return T.matmul(x, _transposed(params["wte"]))
    return T.matmul(x, params["proj"])


def _transposed(w: Tensor) -> Tensor:
    return T.transpose(w, (1, 0))


def loss(params: ParameterStore, batch: np.ndarray, subnet: SubnetSpec | None = None) -> Tensor:
    """Next-token cross-entropy for ``batch`` of shape (B, N + 1)."""
    batch = np.asarray(batch)
    return T.cross_entropy(forward(params, batch[:, :-1], subnet), batch[:, 1:])


# ---------------------------------------------------------------- physical subnets

def extract_physical_subnet(params: ParameterStore, spec: SubnetSpec) -> ParameterStore:
    """Deep-copied store holding only the kept blocks of every partitioned layer."""
    c = params.config
    spec.validate(c)
    out: dict[str, Tensor] = {}
    sliced: dict[str, np.ndarray] = {}
    for l in range(c.L):
        for kind, kept, n_full in (("attn", spec.attn[l], c.H), ("ffn", spec.ffn[l], c.R)):
            if not kept:
                raise InvalidSpecError(f"layer {l} keeps no {kind} blocks")
            if len(kept) == n_full:
                continue
            if l in c.shared_layers:
                raise InvalidSpecError(f"shared layer {l} cannot be narrowed")
            stored = params.layer_heads(l) if kind == "attn" else params.layer_ffn_blocks(l)
            if stored != n_full:
                raise InvalidSpecError(f"layer {l} {kind} is already narrowed")
            for name, axis, width in block_params(c, l, kind):
                sliced[name] = take_blocks(params[name].data, axis, kept, width)
    for name, t in params.items():
        data = sliced[name] if name in sliced else t.data.copy()
        out[name] = Tensor(data, requires_grad=t.requires_grad)
    return ParameterStore(c, out)
