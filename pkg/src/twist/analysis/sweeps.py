"""Random-subnet evaluation sweeps: loss spread per ratio and train/eval ratio grids."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .. import checkpoint as ckpt
from ..blueprint import deployment_spec
from ..config import SubnetSpec, format_ratio, parse_ratio
from ..model import ParameterStore
from ..orchestrator import evaluate
from ..tensor import Rng

SWEEP_STREAM = 5
GRID_COLUMNS = ("label", "scope", "train_k", "eval_k", "metric", "mean", "std", "min", "max", "n")


@dataclass
class Cell:
    label: str
    scope: str
    train_k: str
    eval_k: str
    metric: str
    mean: float
    std: float
    min: float
    max: float
    n: int
    values: list[float] = field(default_factory=list, repr=False)


@dataclass
class SweepResult:
    kind: str
    cells: list[Cell] = field(default_factory=list)

    def cell(self, train_k=None, eval_k=None, label=None) -> Cell:
        for c in self.cells:
            if ((train_k is None or c.train_k == format_ratio(train_k))
                    and (eval_k is None or c.eval_k == format_ratio(eval_k))
                    and (label is None or c.label == label)):
                return c
        raise KeyError((train_k, eval_k, label))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(GRID_COLUMNS)
            for c in self.cells:
                w.writerow([c.label, c.scope, c.train_k, c.eval_k, c.metric, repr(c.mean),
                            repr(c.std), repr(c.min), repr(c.max), c.n])

    @classmethod
    def from_csv(cls, path, kind: str = "") -> SweepResult:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(kind, [Cell(r["label"], r["scope"], r["train_k"], r["eval_k"], r["metric"],
                               float(r["mean"]), float(r["std"]), float(r["min"]), float(r["max"]),
                               int(r["n"])) for r in rows])


def _stats(label, scope, train_k, eval_k, metric, values: Sequence[float]) -> Cell:
    vals = np.asarray(values, dtype=np.float64)
    if np.all(vals == vals[0]):
        mean, std = float(vals[0]), 0.0
    else:
        mean, std = float(math.fsum(vals) / len(vals)), float(vals.std())
    return Cell(label, scope, train_k, eval_k, metric, mean, std, float(vals.min()),
                float(vals.max()), len(vals), [float(v) for v in vals])


def _load(store_or_path) -> ParameterStore:
    if isinstance(store_or_path, ParameterStore):
        return store_or_path
    return ckpt.load(Path(store_or_path))[0]


def sample_specs(config, ratio, n: int, scope: str, seed: int, key: int = 0) -> list[SubnetSpec]:
    """``n`` deployment specs; the same (seed, ratio, key) always gives the same list."""
    r = parse_ratio(ratio)
    gen = Rng(seed).generator(SWEEP_STREAM, key, r.numerator, r.denominator)
    return [deployment_spec(config, r, scope, gen) for _ in range(n)]


def _subnet_values(params: ParameterStore, specs: Sequence[SubnetSpec], tokens, metric: str,
                   eval_kw: dict) -> list[float]:
    cache: dict[SubnetSpec, float] = {}
    out = []
    for spec in specs:
        if spec not in cache:
            res = evaluate(params, tokens, None if spec.is_full(params.config) else spec, **eval_kw)
            cache[spec] = res.loss if metric == "loss" else res.perplexity
        out.append(cache[spec])
    return out


def stability_sweep(checkpoint_twist, checkpoint_dp, ratios: Sequence, n_subnets: int,
                    scope: str, tokens: np.ndarray, seed: int = 0, metric: str = "loss",
                    **eval_kw) -> SweepResult:
    """Distribution of subnet eval loss per ratio for a TwIST and a baseline checkpoint.

    Both checkpoints see the same sampled subnets, so the comparison is paired.
    """
    models = {"twist": _load(checkpoint_twist), "data_parallel": _load(checkpoint_dp)}
    if models["twist"].config != models["data_parallel"].config:
        raise ValueError("checkpoints have different model configs")
    config = models["twist"].config
    result = SweepResult("stability")
    for ratio in ratios:
        specs = sample_specs(config, ratio, n_subnets, scope, seed)
        for label, params in models.items():
            vals = _subnet_values(params, specs, tokens, metric, eval_kw)
            result.cells.append(_stats(label, scope, "", format_ratio(ratio), metric, vals))
    return result


def robustness_grid(checkpoints: Mapping, eval_ratios: Sequence, scope: str, tokens: np.ndarray,
                    n_subnets: int = 10, seed: int = 0, metric: str = "ppl", **eval_kw) -> SweepResult:
    """Mean subnet metric for every (train ratio, eval ratio) pair.

    ``checkpoints`` maps each training ratio to its checkpoint (store or path).
    """
    result = SweepResult("robustness")
    for train_k, ck in checkpoints.items():
        params = _load(ck)
        for eval_k in eval_ratios:
            specs = sample_specs(params.config, eval_k, n_subnets, scope, seed)
            vals = _subnet_values(params, specs, tokens, metric, eval_kw)
            result.cells.append(_stats("twist", scope, format_ratio(train_k), format_ratio(eval_k),
                                       metric, vals))
    return result


def degradation(grid: SweepResult) -> tuple[float, float]:
    """Mean change of each mismatched cell from the same checkpoint's matched cell.

    A model trained at X and evaluated at Y is compared with itself at Y = X.
    Returns (downward, upward): downward cells are evaluated narrower than trained.
    """
    diag = {c.train_k: c.mean for c in grid.cells if c.train_k == c.eval_k}
    down, up = [], []
    for c in grid.cells:
        if c.train_k == c.eval_k or c.train_k not in diag:
            continue
        d = c.mean - diag[c.train_k]
        (down if parse_ratio(c.train_k) > parse_ratio(c.eval_k) else up).append(d)
    mean = lambda xs: float(np.mean(xs)) if xs else math.nan
    return mean(down), mean(up)
