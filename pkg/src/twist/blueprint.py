"""Per-layer block assignments for S homogeneous workers, plus deployment sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .config import InvalidRatioError, ModelConfig, SubnetSpec, kept_count, parse_ratio, scope_parts


class FeasibilityError(ValueError):
    pass


@dataclass(frozen=True)
class Blueprint:
    """Rows are workers; each row lists the (sorted) blocks that worker trains."""
    assignments: np.ndarray
    n_full: int
    common: tuple[int, ...] = ()
    layer_id: int | None = None
    kind: str = ""

    @property
    def S(self) -> int:
        return self.assignments.shape[0]

    @property
    def n_sub(self) -> int:
        return self.assignments.shape[1]

    def row(self, s: int) -> tuple[int, ...]:
        return tuple(int(b) for b in self.assignments[s])

    def to_text(self) -> str:
        rows = "; ".join(" ".join(str(int(b)) for b in r) for r in self.assignments)
        return f"layer={self.layer_id} kind={self.kind} n_full={self.n_full} rows=[{rows}]"


def min_subnet_size(n_full: int, S: int, n_common: int) -> int:
    """Smallest N_sub with (N_full + (S - 1)|C|) / S <= N_sub."""
    return math.ceil(Fraction(n_full + (S - 1) * n_common, S))


def check_feasible(n_full: int, S: int, n_sub: int, n_common: int = 0) -> None:
    if S < 1:
        raise FeasibilityError("need at least one worker")
    lo = min_subnet_size(n_full, S, n_common)
    if n_common > n_sub:
        raise FeasibilityError(f"|C|={n_common} exceeds N_sub={n_sub}")
    if not lo <= n_sub <= n_full:
        raise FeasibilityError(
            f"N_sub={n_sub} violates (N_full + (S-1)|C|)/S = "
            f"({n_full} + {S - 1}*{n_common})/{S} <= N_sub <= N_full={n_full}; "
            f"minimum feasible N_sub is {lo}")


def generate_blueprint(n_full: int, S: int, n_sub: int, common: Sequence[int] = (),
                       rng: np.random.Generator | None = None, layer_id: int | None = None,
                       kind: str = "") -> Blueprint:
    """Assign blocks to ``S`` workers so each row holds ``common``, every block is used,
    and each row has exactly ``n_sub`` distinct blocks."""
    common = tuple(sorted(set(int(b) for b in common)))
    if any(not 0 <= b < n_full for b in common):
        raise FeasibilityError(f"common blocks {common} outside 0..{n_full - 1}")
    check_feasible(n_full, S, n_sub, len(common))
    rng = rng if rng is not None else np.random.default_rng()
    rows: list[list[int]] = [list(common) for _ in range(S)]
    rest = np.array([b for b in range(n_full) if b not in set(common)], dtype=np.int64)
    # deal the non-common blocks round-robin so every block lands somewhere; the
    # deal order is shuffled so no row is tied to particular block indices
    for i, b in enumerate(rng.permutation(rest)):
        rows[i % S].append(int(b))
    for s in range(S):
        filled = set(rows[s])
        n_empty = n_sub - len(filled)
        if n_empty > 0:
            pool = np.array([b for b in range(n_full) if b not in filled])
            rows[s].extend(int(b) for b in rng.choice(pool, size=n_empty, replace=False))
    A = np.array([sorted(r) for r in rows], dtype=np.int64).reshape(S, n_sub)
    return Blueprint(A, n_full, common, layer_id, kind)


@dataclass
class ValidationReport:
    common_ok: bool = True
    coverage_ok: bool = True
    size_ok: bool = True
    bound_ok: bool = True
    missing_common: list[tuple[int, int]] = field(default_factory=list)
    unassigned: list[int] = field(default_factory=list)
    bad_rows: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.common_ok and self.coverage_ok and self.size_ok and self.bound_ok

    def summary(self) -> str:
        parts = [f"(i) common: {'pass' if self.common_ok else f'fail {self.missing_common}'}",
                 f"(ii) coverage: {'pass' if self.coverage_ok else f'fail unassigned={self.unassigned}'}",
                 f"(iii) size: {'pass' if self.size_ok else f'fail {self.bad_rows}'}",
                 f"bound: {'pass' if self.bound_ok else 'fail'}"]
        return "; ".join(parts)


def validate_blueprint(bp: Blueprint) -> ValidationReport:
    rep = ValidationReport()
    A = np.asarray(bp.assignments)
    S, n_sub = A.shape
    for s in range(S):
        row = [int(b) for b in A[s]]
        for c in bp.common:
            if c not in row:
                rep.common_ok = False
                rep.missing_common.append((s, c))
        if len(set(row)) != n_sub:
            rep.size_ok = False
            dups = sorted({b for b in row if row.count(b) > 1})
            rep.bad_rows.append((s, f"duplicate blocks {dups}"))
        out_of_range = [b for b in row if not 0 <= b < bp.n_full]
        if out_of_range:
            rep.size_ok = False
            rep.bad_rows.append((s, f"blocks out of range {out_of_range}"))
    used = set(int(b) for b in A.reshape(-1))
    rep.unassigned = [b for b in range(bp.n_full) if b not in used]
    rep.coverage_ok = not rep.unassigned
    lo = Fraction(bp.n_full + (S - 1) * len(bp.common), S)
    rep.bound_ok = lo <= n_sub <= bp.n_full
    return rep


RoundBlueprints = dict  # (layer, "attn" | "ffn") -> Blueprint


def round_blueprints(config: ModelConfig, S: int, ratio, scope: str,
                     rng: np.random.Generator, common: Sequence[int] = ()) -> RoundBlueprints:
    """Fresh, independent blueprints for every partitioned layer and in-scope sublayer."""
    do_attn, do_ffn = scope_parts(scope)
    out = {}
    for l in config.partitioned_layers:
        for kind, on, n in (("attn", do_attn, config.H), ("ffn", do_ffn, config.R)):
            if on:
                out[(l, kind)] = generate_blueprint(n, S, kept_count(ratio, n), common, rng, l, kind)
    return out


def worker_spec(config: ModelConfig, bps: RoundBlueprints, s: int, scope: str,
                mode: str = "masked") -> SubnetSpec:
    attn, ffn = [], []
    for l in range(config.L):
        a = bps.get((l, "attn"))
        f = bps.get((l, "ffn"))
        if a is not None and s >= a.S or f is not None and s >= f.S:
            raise IndexError(f"worker {s} outside blueprint")
        attn.append(a.row(s) if a is not None else tuple(range(config.H)))
        ffn.append(f.row(s) if f is not None else tuple(range(config.R)))
    return SubnetSpec(tuple(attn), tuple(ffn), mode=mode, scope=scope,
                      scale_correction=config.scale_correction)


def deployment_spec(config: ModelConfig, ratio, scope: str, rng: np.random.Generator,
                    mode: str = "masked") -> SubnetSpec:
    """Uniformly sample round-half-up(ratio * N_full) blocks per partitioned layer."""
    r = parse_ratio(ratio)
    do_attn, do_ffn = scope_parts(scope)
    k_attn, k_ffn = kept_count(r, config.H), kept_count(r, config.R)
    if (do_attn and k_attn == 0) or (do_ffn and k_ffn == 0):
        raise InvalidRatioError(f"ratio {r} keeps zero blocks")
    attn, ffn = [], []
    for l in range(config.L):
        partitioned = l not in config.shared_layers
        if partitioned and do_attn:
            attn.append(tuple(sorted(int(b) for b in rng.choice(config.H, k_attn, replace=False))))
        else:
            attn.append(tuple(range(config.H)))
        if partitioned and do_ffn:
            ffn.append(tuple(sorted(int(b) for b in rng.choice(config.R, k_ffn, replace=False))))
        else:
            ffn.append(tuple(range(config.R)))
    return SubnetSpec(tuple(attn), tuple(ffn), mode=mode, scope=scope,
                      scale_correction=config.scale_correction)
