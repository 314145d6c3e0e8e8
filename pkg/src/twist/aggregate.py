"""Aggregator: merge worker updates back into the central model.

Each scalar becomes the plain mean of the values reported by the workers that
held it, so a uniquely owned value is copied through unchanged. Sums run in
float64 and are rounded once, which makes the result independent of worker order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .model import ParameterStore, block_params, param_shapes
from .tensor import Tensor

# None for a whole tensor, else (axis, element indices along that axis)
SliceKey = tuple[int, tuple[int, ...]] | None


class CoverageError(RuntimeError):
    pass


class CorruptionError(RuntimeError):
    pass


@dataclass
class UpdateSet:
    worker: int
    values: dict[tuple[str, SliceKey], np.ndarray]


def _index(ndim: int, key: SliceKey):
    if key is None:
        return (slice(None),) * ndim
    axis, idx = key
    sl = [slice(None)] * ndim
    sl[axis] = np.asarray(idx, dtype=np.int64)
    return tuple(sl)


def aggregate(central: ParameterStore, updates: Sequence[UpdateSet]) -> ParameterStore:
    acc = {name: np.zeros(t.shape, np.float64) for name, t in central.items()}
    cnt = {name: np.zeros(t.shape, np.int32) for name, t in central.items()}
    for upd in sorted(updates, key=lambda u: u.worker):
        for (name, key), values in upd.values.items():
            if name not in acc:
                raise CorruptionError(f"worker {upd.worker} reported unknown parameter {name!r}")
            ix = _index(acc[name].ndim, key)
            target_shape = acc[name][ix].shape
            if np.shape(values) != target_shape:
                raise CorruptionError(
                    f"worker {upd.worker}: {name!r} slice has shape {np.shape(values)}, "
                    f"expected {target_shape}")
            acc[name][ix] += values
            cnt[name][ix] += 1
    out = {}
    for name, t in central.items():
        c = cnt[name]
        if not c.all():
            first = tuple(int(i) for i in np.argwhere(c == 0)[0])
            raise CoverageError(f"{name!r} element {first} is held by no worker")
        out[name] = Tensor((acc[name] / c).astype(np.float32), requires_grad=t.requires_grad)
    return ParameterStore(central.config, out)


def coverage_census(bps: dict, config: ModelConfig, S: int | None = None) -> dict:
    """Holder count per (name, block) for partitioned blocks and per (name, None) otherwise."""
    if S is None:
        sizes = {bp.S for bp in bps.values()}
        if len(sizes) != 1:
            raise ValueError("cannot infer worker count; pass S")
        S = sizes.pop()
    census: dict = {}
    split: set[str] = set()
    for (l, kind), bp in bps.items():
        counts = np.bincount(np.asarray(bp.assignments).reshape(-1), minlength=bp.n_full)
        for name, _, _ in block_params(config, l, kind):
            split.add(name)
            for b in range(bp.n_full):
                census[(name, b)] = int(counts[b])
    for name in param_shapes(config):
        if name not in split:
            census[(name, None)] = S
    return census
