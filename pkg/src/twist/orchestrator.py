"""Training backends and evaluation.

``train_twist`` runs repartition rounds: draw blueprints, scatter subnets, let
each worker take ``repartition_interval`` local Adam steps on its own data
shard, gather and aggregate. ``train_data_parallel`` is the synchronous
full-model baseline with gradient averaging.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from .aggregate import aggregate
from .analysis.cost import count_params
from .blueprint import check_feasible, round_blueprints
from .config import ConfigError, ModelConfig, SubnetSpec, kept_count, parse_ratio, scope_parts
from .data import Corpus, load_corpus, sequences, shard_batches
from .partition import VARIANTS, ScatterManifest, WorkerPayload, gather, scatter, write_round_log
from .tensor import AdamState, InvalidInputError, NonFiniteGradientError, Rng, Tensor, adam_step

log = logging.getLogger(__name__)

DATA_STREAM = 2
BLUEPRINT_STREAM = 3
BACKENDS = ("twist", "data_parallel")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    backend: str = "twist"
    S: int = 4
    epochs: int = 3
    batch_size: int = 8
    seq_len: int = 128
    lr: float = 1e-3
    repartition_interval: int = 15
    scope: str = "both"
    train_ratio: str = "4/8"
    variant: str = "masked"
    seed: int = 0
    dataset: str = ""
    tokenizer: str = "char"
    eval_every: int = 0
    eval_batches: int | None = None
    common: tuple[int, ...] = ()
    threads: int = 1
    max_rounds: int | None = None

    def validate(self, model_cfg: ModelConfig | None = None) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        scope_parts(self.scope)
        for name in ("S", "epochs", "batch_size", "seq_len", "repartition_interval", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        ratio = parse_ratio(self.train_ratio)
        if model_cfg is not None:
            if self.seq_len > model_cfg.context:
                raise ConfigError(f"seq_len {self.seq_len} exceeds context {model_cfg.context}")
            if self.backend == "twist":
                do_attn, do_ffn = scope_parts(self.scope)
                for on, n in ((do_attn, model_cfg.H), (do_ffn, model_cfg.R)):
                    if on and model_cfg.partitioned_layers:
                        check_feasible(n, self.S, kept_count(ratio, n), len(self.common))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["common"] = list(self.common)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "common" in d:
            d["common"] = tuple(d["common"] or ())
        if "train_ratio" in d:
            d["train_ratio"] = str(d["train_ratio"])
        return cls(**d)


@dataclass
class RoundLog:
    round: int
    epoch: int
    batches: int
    train_loss: float
    eval_loss: float
    bytes_round: int
    bytes_cum: int


LOSS_COLUMNS = tuple(f.name for f in fields(RoundLog))


@dataclass
class RunRecord:
    backend: str
    rounds: list[RoundLog] = field(default_factory=list)
    initial_eval: float = math.nan
    final_eval: float = math.nan
    peak_worker_bytes: int = 0
    wall_clock: float = 0.0
    checkpoint: str | None = None
    manifests: list[tuple[int, ScatterManifest]] = field(default_factory=list, repr=False)
    params: M.ParameterStore | None = field(default=None, repr=False)

    @property
    def bytes_total(self) -> int:
        return self.rounds[-1].bytes_cum if self.rounds else 0

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.rounds]

    def write_csv(self, path) -> None:
        write_loss_csv(path, self.rounds)


def write_loss_csv(path, rounds: Sequence[RoundLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rounds:
            w.writerow([r.round, r.epoch, r.batches, repr(r.train_loss), repr(r.eval_loss),
                        r.bytes_round, r.bytes_cum])


def read_loss_csv(path) -> list[RoundLog]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RoundLog(int(r["round"]), int(r["epoch"]), int(r["batches"]), float(r["train_loss"]),
                     float(r["eval_loss"]), int(r["bytes_round"]), int(r["bytes_cum"]))
            for r in rows]


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    loss: float
    perplexity: float
    n_tokens: int


def evaluate(params: M.ParameterStore | str | Path, tokens: np.ndarray,
             spec: SubnetSpec | None = None, seq_len: int = 128, batch_size: int = 8,
             max_batches: int | None = None) -> EvalResult:
    """Mean next-token cross-entropy over non-overlapping windows of ``tokens``."""
    if not isinstance(params, M.ParameterStore):
        params, _ = ckpt.load(params)
    seq_len = min(seq_len, params.config.context)
    seqs = sequences(np.asarray(tokens), seq_len)
    if len(seqs) == 0:
        raise InvalidInputError(f"split has too few tokens for one window of {seq_len + 1}")
    if max_batches is not None:
        seqs = seqs[:max_batches * batch_size]
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        batch = seqs[i:i + batch_size]
        n = batch.shape[0] * seq_len
        total += float(M.loss(params, batch, spec).item()) * n
        count += n
    mean = total / count
    return EvalResult(mean, math.exp(mean) if mean < 700 else math.inf, count)


def evaluate_workers(params: M.ParameterStore, specs: Sequence[SubnetSpec], tokens: np.ndarray,
                     **kw) -> tuple[float, list[EvalResult]]:
    """Evaluate each worker's subnet and average the losses."""
    results = [evaluate(params, tokens, spec, **kw) for spec in specs]
    return float(np.mean([r.loss for r in results])), results


# ---------------------------------------------------------------- helpers

def _corpus(cfg: TrainConfig, model_cfg: ModelConfig, corpus: Corpus | None) -> Corpus:
    if corpus is None:
        corpus = load_corpus(cfg.dataset, cfg.tokenizer, max_vocab=model_cfg.vocab)
    elif corpus.vocab_size > model_cfg.vocab:
        raise ConfigError(f"corpus vocabulary {corpus.vocab_size} exceeds model vocab {model_cfg.vocab}")
    return corpus


def _eval(params, corpus, cfg: TrainConfig) -> float:
    return evaluate(params, corpus.valid, seq_len=cfg.seq_len, batch_size=cfg.batch_size,
                    max_batches=cfg.eval_batches).loss


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite loss {value} at {where}")


def _inactive_zeroer(config: ModelConfig, spec: SubnetSpec) -> dict[str, tuple[int, np.ndarray]]:
    """(axis, kept element indices) for every block-split tensor narrowed by ``spec``."""
    out = {}
    for l in range(config.L):
        for kind, kept, n in (("attn", spec.attn[l], config.H), ("ffn", spec.ffn[l], config.R)):
            if len(kept) < n:
                for name, axis, width in M.block_params(config, l, kind):
                    out[name] = (axis, M.block_columns(kept, width))
    return out


def _zero_inactive(grads: dict[str, np.ndarray], keep: dict[str, tuple[int, np.ndarray]]) -> None:
    for name, (axis, idx) in keep.items():
        g = grads.get(name)
        if g is None:
            continue
        clean = np.zeros_like(g)
        sl = [slice(None)] * g.ndim
        sl[axis] = idx
        clean[tuple(sl)] = g[tuple(sl)]
        grads[name] = clean


def local_train(payload: WorkerPayload, batches: np.ndarray, lr: float,
                where: str = "") -> list[float]:
    """Fresh Adam over ``batches`` on the worker's own copy; stores the result in ``payload.trained``."""
    store = payload.materialize()
    spec = payload.spec
    keep = _inactive_zeroer(store.config, spec) if payload.mask is not None else {}
    state = AdamState()
    losses = []
    for i, batch in enumerate(batches):
        store.zero_grad()
        out = M.loss(store, batch, spec)
        value = out.item()
        _check_finite(value, f"{where} worker {payload.worker} batch {i}")
        out.backward()
        grads = store.grads()
        _zero_inactive(grads, keep)
        try:
            adam_step(store, grads, state, lr)
        except NonFiniteGradientError as e:
            raise TrainingAborted(f"{where} worker {payload.worker} batch {i}: {e}") from e
        losses.append(value)
    store.zero_grad()
    payload.trained = store
    return losses


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _finish(record: RunRecord, central: M.ParameterStore, corpus: Corpus, cfg: TrainConfig,
            out_dir, t0: float) -> RunRecord:
    record.final_eval = _eval(central, corpus, cfg)
    record.params = central
    record.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.checkpoint = str(ckpt.save(central, out / "model.twst"))
        record.write_csv(out / "losses.csv")
        if record.manifests:
            write_round_log(out / "rounds.csv", record.manifests)
    return record


# ---------------------------------------------------------------- backends

def train_twist(cfg: TrainConfig, model_cfg: ModelConfig, corpus: Corpus | None = None,
                out_dir=None, central: M.ParameterStore | None = None) -> RunRecord:
    cfg.validate(model_cfg)
    ratio = parse_ratio(cfg.train_ratio)
    corpus = _corpus(cfg, model_cfg, corpus)
    t0 = time.perf_counter()
    rng = Rng(cfg.seed)
    central = central if central is not None else M.init_params(model_cfg, rng)
    seqs = sequences(corpus.train, cfg.seq_len)
    record = RunRecord("twist", initial_eval=_eval(central, corpus, cfg))
    rnd, cum = 0, 0
    for epoch in range(cfg.epochs):
        shards = shard_batches(seqs, cfg.S, cfg.batch_size, rng.generator(DATA_STREAM, epoch))
        for start in range(0, shards.shape[1], cfg.repartition_interval):
            if cfg.max_rounds is not None and rnd >= cfg.max_rounds:
                break
            stop = min(start + cfg.repartition_interval, shards.shape[1])
            bps = round_blueprints(model_cfg, cfg.S, ratio, cfg.scope,
                                   rng.generator(BLUEPRINT_STREAM, rnd), cfg.common)
            payloads, manifests = scatter(central, bps, cfg.variant, cfg.S, cfg.scope)
            where = f"round {rnd}"
            losses = _map(lambda p: local_train(p, shards[p.worker, start:stop], cfg.lr, where),
                          payloads, cfg.threads)
            updates = gather(payloads, manifests)
            central = aggregate(central, updates)
            round_bytes = sum(m.bytes_out + m.bytes_in for m in manifests)
            cum += round_bytes
            record.peak_worker_bytes = max(record.peak_worker_bytes,
                                           max(m.bytes_out for m in manifests))
            record.manifests.extend((rnd, m) for m in manifests)
            train_loss = float(np.mean([np.mean(l) for l in losses]))
            _check_finite(train_loss, where)
            ev = math.nan
            if cfg.eval_every and (rnd + 1) % cfg.eval_every == 0:
                ev = _eval(central, corpus, cfg)
            record.rounds.append(RoundLog(rnd, epoch, stop - start, train_loss, ev, round_bytes, cum))
            log.info("round %d epoch %d loss %.4f bytes %d", rnd, epoch, train_loss, cum)
            rnd += 1
    return _finish(record, central, corpus, cfg, out_dir, t0)


def _view(store: M.ParameterStore) -> M.ParameterStore:
    """Fresh tensor handles over the same arrays, so each worker owns its gradients."""
    return M.ParameterStore(store.config, {k: Tensor(v.data, requires_grad=True)
                                           for k, v in store.items()})


def data_parallel_step(central: M.ParameterStore, worker_batches: Sequence[np.ndarray],
                       state: AdamState, lr: float, threads: int = 1) -> list[float]:
    """One synchronous step: per-worker gradients, averaged, one shared Adam update."""
    def work(batch):
        view = _view(central)
        out = M.loss(view, batch)
        out.backward()
        return out.item(), view.grads()

    results = _map(work, worker_batches, threads)
    losses = [r[0] for r in results]
    for i, v in enumerate(losses):
        _check_finite(v, f"worker {i}")
    acc = {k: np.zeros(g.shape, np.float64) for k, g in results[0][1].items()}
    for _, grads in results:
        for k, g in grads.items():
            acc[k] += g
    avg = {k: (a / len(results)).astype(np.float32) for k, a in acc.items()}
    try:
        adam_step(central, avg, state, lr)
    except NonFiniteGradientError as e:
        raise TrainingAborted(str(e)) from e
    return losses


def train_data_parallel(cfg: TrainConfig, model_cfg: ModelConfig, corpus: Corpus | None = None,
                        out_dir=None, central: M.ParameterStore | None = None) -> RunRecord:
    cfg.validate(model_cfg)
    corpus = _corpus(cfg, model_cfg, corpus)
    t0 = time.perf_counter()
    rng = Rng(cfg.seed)
    central = central if central is not None else M.init_params(model_cfg, rng)
    seqs = sequences(corpus.train, cfg.seq_len)
    full_bytes = count_params(model_cfg).memory_bytes
    record = RunRecord("data_parallel", initial_eval=_eval(central, corpus, cfg),
                       peak_worker_bytes=full_bytes)
    state = AdamState()
    rnd, cum = 0, 0
    for epoch in range(cfg.epochs):
        shards = shard_batches(seqs, cfg.S, cfg.batch_size, rng.generator(DATA_STREAM, epoch))
        for start in range(0, shards.shape[1], cfg.repartition_interval):
            if cfg.max_rounds is not None and rnd >= cfg.max_rounds:
                break
            stop = min(start + cfg.repartition_interval, shards.shape[1])
            losses = []
            for b in range(start, stop):
                step = data_parallel_step(central, shards[:, b], state, cfg.lr, cfg.threads)
                losses.append(float(np.mean(step)))
            # every worker sends and receives the full model once per round
            round_bytes = cfg.S * 2 * full_bytes
            cum += round_bytes
            ev = math.nan
            if cfg.eval_every and (rnd + 1) % cfg.eval_every == 0:
                ev = _eval(central, corpus, cfg)
            record.rounds.append(RoundLog(rnd, epoch, stop - start, float(np.mean(losses)), ev,
                                          round_bytes, cum))
            log.info("round %d epoch %d loss %.4f", rnd, epoch, record.rounds[-1].train_loss)
            rnd += 1
    return _finish(record, central, corpus, cfg, out_dir, t0)


def train(cfg: TrainConfig, model_cfg: ModelConfig, corpus: Corpus | None = None,
          out_dir=None) -> RunRecord:
    fn = train_twist if cfg.backend == "twist" else train_data_parallel
    return fn(cfg, model_cfg, corpus, out_dir)
