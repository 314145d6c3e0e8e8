"""Dispatcher: turn blueprints into worker subnets and collect their updates.

Transport is simulated. Data never leaves the process, but every scatter and
gather records the bytes a 32-bit parameter transfer would carry.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregate import SliceKey, UpdateSet
from .analysis.cost import subnet_param_count
from .blueprint import RoundBlueprints, worker_spec
from .config import InvalidSpecError, ModelConfig, SubnetSpec
from .model import ParameterStore, block_columns, block_params, extract_physical_subnet

VARIANTS = ("masked", "physical", "hybrid")


class InvalidWorkerError(IndexError):
    pass


class IncompleteRoundError(RuntimeError):
    pass


@dataclass
class Mask:
    """Per-layer head mask (length H) and FFN activation mask (length d_inner)."""
    heads: list[np.ndarray]
    ffn: list[np.ndarray]

    @classmethod
    def ones(cls, config: ModelConfig) -> Mask:
        return cls([np.ones(config.H, np.float32) for _ in range(config.L)],
                   [np.ones(config.d_inner, np.float32) for _ in range(config.L)])


def mask_from_spec(spec: SubnetSpec, config: ModelConfig) -> Mask:
    heads, ffn = [], []
    for l in range(config.L):
        h = np.zeros(config.H, np.float32)
        h[list(spec.attn[l])] = 1.0
        f = np.zeros(config.d_inner, np.float32)
        f[block_columns(spec.ffn[l], config.ffn_block)] = 1.0
        heads.append(h)
        ffn.append(f)
    return Mask(heads, ffn)


def masks_from_blueprint(bps: RoundBlueprints, s: int, config: ModelConfig,
                         scope: str = "both") -> Mask:
    S = _workers(bps)
    if S is not None and not 0 <= s < S:
        raise InvalidWorkerError(f"worker {s} outside 0..{S - 1}")
    return mask_from_spec(worker_spec(config, bps, s, scope), config)


def _workers(bps: RoundBlueprints) -> int | None:
    sizes = {bp.S for bp in bps.values()}
    if len(sizes) > 1:
        raise InvalidSpecError(f"blueprints disagree on worker count: {sorted(sizes)}")
    return sizes.pop() if sizes else None


@dataclass
class ScatterManifest:
    worker: int
    attn: tuple[tuple[int, ...], ...]
    ffn: tuple[tuple[int, ...], ...]
    bytes_out: int
    bytes_in: int = 0

    @property
    def blocks_attn(self) -> int:
        return sum(len(r) for r in self.attn)

    @property
    def blocks_ffn(self) -> int:
        return sum(len(r) for r in self.ffn)


@dataclass
class WorkerPayload:
    """What one worker receives. Masked payloads reference the central store."""
    worker: int
    spec: SubnetSpec
    store: ParameterStore
    mask: Mask | None = None
    trained: ParameterStore | None = field(default=None, repr=False)

    def materialize(self) -> ParameterStore:
        """A store the worker may mutate freely."""
        return self.store.copy() if self.mask is not None else self.store


def worker_mode(variant: str, s: int) -> str:
    if variant not in VARIANTS:
        raise InvalidSpecError(f"unknown variant {variant!r}")
    if variant == "hybrid":
        return "masked" if s == 0 else "physical"
    return variant


def scatter(central: ParameterStore, bps: RoundBlueprints, variant: str, S: int | None = None,
            scope: str = "both") -> tuple[list[WorkerPayload], list[ScatterManifest]]:
    c = central.config
    n = _workers(bps)
    S = S if S is not None else n
    if S is None:
        raise InvalidSpecError("cannot infer worker count from an empty blueprint set")
    if n is not None and n != S:
        raise InvalidSpecError(f"blueprints are for {n} workers, asked for {S}")
    for (l, kind), bp in bps.items():
        if l in c.shared_layers or not 0 <= l < c.L:
            raise InvalidSpecError(f"blueprint for non-partitioned layer {l}")
        if bp.n_full != (c.H if kind == "attn" else c.R):
            raise InvalidSpecError(f"layer {l} {kind} blueprint has N_full={bp.n_full}")
    payloads, manifests = [], []
    for s in range(S):
        mode = worker_mode(variant, s)
        spec = worker_spec(c, bps, s, scope, mode)
        if mode == "masked":
            payloads.append(WorkerPayload(s, spec, central, mask_from_spec(spec, c)))
        else:
            payloads.append(WorkerPayload(s, spec, extract_physical_subnet(central, spec)))
        manifests.append(ScatterManifest(s, spec.attn, spec.ffn, 4 * subnet_param_count(c, spec)))
    return payloads, manifests


def slice_key(config: ModelConfig, spec: SubnetSpec, name: str) -> tuple[SliceKey, int | None]:
    """Where ``name`` lives inside the central tensor for this worker, and the sliced axis."""
    if name.startswith("h"):
        layer = int(name[1:name.index(".")])
        kind = "attn" if ".attn." in name else "ffn" if ".ffn." in name else None
        if kind is not None:
            kept = spec.attn[layer] if kind == "attn" else spec.ffn[layer]
            n_full = config.H if kind == "attn" else config.R
            if len(kept) < n_full:
                for pname, axis, width in block_params(config, layer, kind):
                    if pname == name:
                        return (axis, tuple(int(i) for i in block_columns(kept, width))), axis
    return None, None


def updates_from_store(config: ModelConfig, spec: SubnetSpec, store: ParameterStore,
                       worker: int, physical: bool) -> UpdateSet:
    values = {}
    for name, t in store.items():
        key, axis = slice_key(config, spec, name)
        if key is None or physical:
            values[(name, key)] = t.data
        else:
            values[(name, key)] = np.take(t.data, np.asarray(key[1]), axis=axis)
    return UpdateSet(worker, values)


def gather(payloads: Sequence[WorkerPayload], manifests: Sequence[ScatterManifest]) -> list[UpdateSet]:
    """Collect each worker's trained values keyed by (name, slice); a barrier."""
    if len(payloads) != len(manifests):
        raise IncompleteRoundError("payload and manifest counts differ")
    by_worker = {p.worker: p for p in payloads}
    out = []
    for m in manifests:
        p = by_worker.get(m.worker)
        if p is None or p.trained is None:
            raise IncompleteRoundError(f"worker {m.worker} did not report back")
        upd = updates_from_store(p.store.config, p.spec, p.trained, p.worker,
                                 physical=p.mask is None)
        m.bytes_in = 4 * sum(v.size for v in upd.values.values())
        out.append(upd)
    return out


ROUND_LOG_COLUMNS = ("round", "worker", "bytes_out", "bytes_in", "blocks_attn", "blocks_ffn")


def write_round_log(path, rows: Sequence[tuple[int, ScatterManifest]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUND_LOG_COLUMNS)
        for rnd, m in rows:
            w.writerow([rnd, m.worker, m.bytes_out, m.bytes_in, m.blocks_attn, m.blocks_ffn])


def read_round_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: int(v) for k, v in row.items()} for row in csv.DictReader(fh)]
