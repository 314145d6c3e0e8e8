"""Monte Carlo checks of how sublayer output norms shrink when blocks are dropped.

Both verifiers draw inputs with unit-variance components (what a freshly
initialized layernorm emits), He-style weights matching ``model.init_params``,
and compare a random subset of blocks against the full sublayer. Weights are
redrawn every ``samples_per_draw`` inputs so the estimate averages over
initializations as well as inputs.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

RATIO_TOL = 0.02      # relative, on E||y'|| / E||y||
SQUARED_TOL = 0.01    # relative, on E||y'||^2 / E||y||^2
VARIANCE_TOL = 0.10   # relative, on per-component variance


@dataclass
class ScalingRow:
    check: str
    fraction: float
    measured: float
    predicted: float
    abs_err: float
    tolerance: float
    relative: bool
    passed: bool


def _row(check: str, fraction, measured: float, predicted: float, tol: float, relative: bool) -> ScalingRow:
    err = abs(measured - predicted)
    bound = tol * abs(predicted) if relative else tol
    return ScalingRow(check, float(fraction), float(measured), float(predicted), err, tol, relative,
                      bool(err <= bound))


SCALING_COLUMNS = ("check", "fraction", "measured", "predicted", "abs_err", "tolerance", "relative", "passed")


def table_to_csv(rows: Iterable[ScalingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(SCALING_COLUMNS)
    for r in rows:
        d = asdict(r)
        w.writerow([d["check"]] + [repr(float(d[k])) for k in ("fraction", "measured", "predicted", "abs_err",
                                                         "tolerance")]
                   + [int(r.relative), int(r.passed)])
    return buf.getvalue()


def table_from_csv(text: str) -> list[ScalingRow]:
    out = []
    for d in csv.DictReader(io.StringIO(text)):
        out.append(ScalingRow(d["check"], float(d["fraction"]), float(d["measured"]),
                              float(d["predicted"]), float(d["abs_err"]), float(d["tolerance"]),
                              bool(int(d["relative"])), bool(int(d["passed"]))))
    return out


def _chunks(trials: int, size: int):
    done = 0
    while done < trials:
        n = min(size, trials - done)
        yield n
        done += n


def ffn_norm_samples(d_model: int, d_inner: int, fractions: Sequence, trials: int,
                     rng: np.random.Generator, samples_per_draw: int = 200):
    """Per-sample ||y|| for the full FFN and for each kept fraction, plus summed y components."""
    keep = [max(1, int(round(float(f) * d_inner))) for f in fractions]
    full = np.empty(trials)
    sub = np.empty((len(fractions), trials))
    s1 = s2 = 0.0
    pos = 0
    for n in _chunks(trials, samples_per_draw):
        W = rng.standard_normal((d_model, d_inner)) * math.sqrt(2.0 / d_model)
        C = rng.standard_normal((d_inner, d_model)) * math.sqrt(1.0 / d_inner)
        x = rng.standard_normal((n, d_model))
        h = np.maximum(x @ W, 0.0)
        y = h @ C
        full[pos:pos + n] = np.linalg.norm(y, axis=1)
        s1 += y.sum()
        s2 += (y * y).sum()
        for i, k in enumerate(keep):
            idx = rng.choice(d_inner, size=k, replace=False)
            sub[i, pos:pos + n] = np.linalg.norm(h[:, idx] @ C[idx], axis=1)
        pos += n
    count = trials * d_model
    var = s2 / count - (s1 / count) ** 2
    return full, sub, var


def mc_verify_ffn_scaling(d_model: int = 256, d_inner: int = 1024,
                          fractions: Sequence = (Fraction(1, 4), Fraction(1, 2), Fraction(3, 4)),
                          trials: int = 20_000, rng: np.random.Generator | None = None,
                          samples_per_draw: int = 200) -> list[ScalingRow]:
    rng = rng if rng is not None else np.random.default_rng(0)
    full, sub, var = ffn_norm_samples(d_model, d_inner, fractions, trials, rng, samples_per_draw)
    rows = []
    for i, f in enumerate(fractions):
        kept = max(1, int(round(float(f) * d_inner))) / d_inner
        rows.append(_row("ffn_norm_ratio", f, sub[i].mean() / full.mean(), math.sqrt(kept),
                         RATIO_TOL, True))
        rows.append(_row("ffn_sq_norm_ratio", f, (sub[i] ** 2).mean() / (full ** 2).mean(), kept,
                         SQUARED_TOL, True))
    rows.append(_row("ffn_component_var", 1.0, var, 1.0, VARIANCE_TOL, True))
    return rows


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attn_row_samples(N: int, d_model: int, H: int, d_head: int, head_counts: Sequence[int],
                     trials: int, rng: np.random.Generator, samples_per_draw: int = 200,
                     surrogate: bool = True):
    """Per-sample norm of one output row for all heads and for each head subset.

    With ``surrogate`` every head attends uniformly, so each output row is the
    token mean pushed through W^V and the output projection. Otherwise real
    (non-causal) softmax attention with random W^Q, W^K is used.
    """
    d_attn = H * d_head
    full = np.empty(trials)
    sub = np.empty((len(head_counts), trials))
    s1 = s2 = 0.0
    comps = 0
    pos = 0
    for n in _chunks(trials, samples_per_draw):
        Wv = rng.standard_normal((d_model, d_attn)) * math.sqrt(1.0 / d_model)
        C = rng.standard_normal((d_attn, d_model)) * math.sqrt(1.0 / d_attn)
        X = rng.standard_normal((n, N, d_model))
        if surrogate:
            heads = (X.mean(axis=1) @ Wv).reshape(n, H, d_head)       # row 0 == every row
        else:
            Wq = rng.standard_normal((d_model, d_attn)) * math.sqrt(1.0 / d_model)
            Wk = rng.standard_normal((d_model, d_attn)) * math.sqrt(1.0 / d_model)
            q = (X[:, :1] @ Wq).reshape(n, 1, H, d_head).transpose(0, 2, 1, 3)
            k = (X @ Wk).reshape(n, N, H, d_head).transpose(0, 2, 1, 3)
            v = (X @ Wv).reshape(n, N, H, d_head).transpose(0, 2, 1, 3)
            a = _softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d_head))
            heads = (a @ v)[:, :, 0, :]
        Cb = C.reshape(H, d_head, d_model)
        per_head = np.einsum("nhd,hdm->nhm", heads, Cb)
        y = per_head.sum(axis=1)
        full[pos:pos + n] = np.linalg.norm(y, axis=1)
        s1 += y.sum()
        s2 += (y * y).sum()
        comps += y.size
        for i, hc in enumerate(head_counts):
            idx = rng.choice(H, size=hc, replace=False)
            sub[i, pos:pos + n] = np.linalg.norm(per_head[:, idx].sum(axis=1), axis=1)
        pos += n
    var = s2 / comps - (s1 / comps) ** 2
    return full, sub, var


def mc_verify_attn_scaling(N: int = 32, d_model: int = 512, H: int = 8, d_head: int = 64,
                           head_counts: Sequence[int] = (8, 4, 2), trials: int = 20_000,
                           rng: np.random.Generator | None = None, samples_per_draw: int = 200,
                           surrogate: bool = True) -> list[ScalingRow]:
    rng = rng if rng is not None else np.random.default_rng(0)
    if any(not 1 <= h <= H for h in head_counts):
        raise ValueError(f"head counts {list(head_counts)} outside 1..{H}")
    full, sub, var = attn_row_samples(N, d_model, H, d_head, head_counts, trials, rng,
                                      samples_per_draw, surrogate)
    rows = []
    for i, hc in enumerate(head_counts):
        f = Fraction(hc, H)
        rows.append(_row("attn_norm_ratio", f, sub[i].mean() / full.mean(), math.sqrt(f),
                         RATIO_TOL, True))
        rows.append(_row("attn_sq_norm_ratio", f, (sub[i] ** 2).mean() / (full ** 2).mean(),
                         float(f), SQUARED_TOL, True))
    rows.append(_row("attn_component_var", 1.0, var, 1.0 / N, VARIANCE_TOL, True))
    return rows
