"""Command-line entry point: ``twist {train,extract,eval,verify,cost,sweep}``.

Exit codes: 0 ok, 2 bad config or input, 3 a verification check failed,
4 training aborted. Artifacts land under ``--out``, else ``$TWIST_OUTPUT_DIR``,
else ``./runs``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import checkpoint as ckpt
from .analysis import cost as C
from .analysis.montecarlo import mc_verify_attn_scaling, mc_verify_ffn_scaling, table_to_csv
from .analysis.sweeps import robustness_grid, stability_sweep
from .blueprint import FeasibilityError, deployment_spec
from .config import (ConfigError, InvalidRatioError, InvalidSpecError, ModelConfig, SubnetSpec,
                     parse_ratio)
from .data import load_corpus
from .model import extract_physical_subnet
from .orchestrator import TrainConfig, TrainingAborted, evaluate, train
from .tensor import InvalidInputError, Rng

EXIT_OK, EXIT_INPUT, EXIT_VERIFY, EXIT_ABORT = 0, 2, 3, 4
OUTPUT_ENV = "TWIST_OUTPUT_DIR"
DEPLOY_STREAM = 4

log = logging.getLogger("twist")


class UsageError(ValueError):
    pass


INPUT_ERRORS = (ConfigError, InvalidRatioError, InvalidSpecError, FeasibilityError,
                InvalidInputError, ckpt.CheckpointFormatError, FileNotFoundError, UsageError,
                C.InvalidSparsityError, ValueError)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or "runs")


# ---------------------------------------------------------------- config resolution

MODEL_FLAGS = {"layers": "L", "d_model": "d_model", "heads": "H", "d_head": "d_head",
               "d_inner": "d_inner", "ffn_blocks": "R", "vocab": "vocab", "context": "context",
               "shared_layers": "shared_layers", "activation": "activation",
               "tie_projection": "tie_projection", "scale_correction": "scale_correction"}
TRAIN_FLAGS = {"backend": "backend", "workers": "S", "epochs": "epochs", "batch_size": "batch_size",
               "seq_len": "seq_len", "lr": "lr", "interval": "repartition_interval",
               "scope": "scope", "ratio": "train_ratio", "variant": "variant", "seed": "seed",
               "dataset": "dataset", "tokenizer": "tokenizer", "eval_every": "eval_every",
               "eval_batches": "eval_batches", "common": "common", "threads": "threads",
               "max_rounds": "max_rounds"}


def read_config_file(path) -> dict:
    """YAML or JSON with ``model`` and ``train`` sections; a run manifest also works."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: expected a mapping at top level")
    if "config" in doc and isinstance(doc["config"], dict):
        doc = doc["config"]
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}")
    return {"model": dict(doc.get("model") or {}), "train": dict(doc.get("train") or {})}


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    text = str(text).strip()
    return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()


def resolve_train_config(args) -> tuple[ModelConfig, TrainConfig, object]:
    """Flags override the config file, which overrides defaults. Returns the corpus too."""
    doc = read_config_file(args.config) if args.config else {"model": {}, "train": {}}
    model_d, train_d = doc["model"], doc["train"]
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            train_d[key] = v
    for flag, key in MODEL_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            model_d[key] = v
    if "shared_layers" in model_d:
        model_d["shared_layers"] = _int_list(model_d["shared_layers"])
    if "common" in train_d:
        train_d["common"] = _int_list(train_d["common"])
    tcfg = TrainConfig.from_dict(train_d)
    if not tcfg.dataset:
        raise UsageError("no dataset given (--dataset or train.dataset)")
    corpus = load_corpus(tcfg.dataset, tcfg.tokenizer)
    model_d.setdefault("vocab", corpus.vocab_size)
    model_d.setdefault("context", max(tcfg.seq_len, ModelConfig().context))
    unknown = set(model_d) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    mcfg = ModelConfig.from_dict(model_d)
    if corpus.vocab_size > mcfg.vocab:
        raise ConfigError(f"corpus vocabulary {corpus.vocab_size} exceeds model vocab {mcfg.vocab}")
    tcfg.validate(mcfg)
    return mcfg, tcfg, corpus


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: dict = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str | None = None
    status: str = "running"

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    mcfg, tcfg, corpus = resolve_train_config(args)
    out = Path(args.out) if args.out else output_root() / f"train-{tcfg.backend}-seed{tcfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", {"model": mcfg.to_dict(), "train": tcfg.to_dict()}, tcfg.seed,
                           {"checkpoint": str(out / "model.twst"), "losses": str(out / "losses.csv")},
                           started=_now())
    if tcfg.backend == "twist":
        manifest.artifacts["rounds"] = str(out / "rounds.csv")
    manifest.write(out / "manifest.json")
    try:
        record = train(tcfg, mcfg, corpus, out)
    except TrainingAborted as e:
        manifest.status, manifest.finished = "aborted", _now()
        manifest.write(out / "manifest.json")
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    manifest.status, manifest.finished = "ok", _now()
    manifest.write(out / "manifest.json")
    print(f"initial_eval_loss={record.initial_eval:.6f} final_eval_loss={record.final_eval:.6f} "
          f"rounds={len(record.rounds)} bytes={record.bytes_total} out={out}")
    return EXIT_OK


def _spec_from_args(config: ModelConfig, ratio, scope: str, seed: int, mode: str) -> SubnetSpec:
    return deployment_spec(config, ratio_arg(ratio, config), scope,
                           Rng(seed).generator(DEPLOY_STREAM), mode)


def ratio_arg(text, config: ModelConfig | None = None) -> Fraction:
    """``"6/12"`` or ``0.5`` is a fraction; a bare integer ``X`` means X of H blocks."""
    s = str(text).strip()
    if s.isdigit() and config is not None:
        if config.H != config.R:
            raise UsageError(f"integer ratio {s} is ambiguous when H={config.H} != R={config.R}")
        return parse_ratio(Fraction(int(s), config.H))
    return parse_ratio(s)


def cmd_extract(args) -> int:
    params, _ = ckpt.load(args.checkpoint)
    spec = _spec_from_args(params.config, args.ratio, args.scope, args.seed, "physical")
    sub = extract_physical_subnet(params, spec)
    out = Path(args.out)
    ckpt.save(sub, out)
    side = out.with_suffix(out.suffix + ".json")
    side.write_text(json.dumps({"parent": str(args.checkpoint), "ratio": str(args.ratio),
                                "seed": args.seed, "spec": spec.to_dict()}, indent=2) + "\n")
    print(f"wrote {out} ({out.stat().st_size} bytes, {sub.num_params()} params) spec={side}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _ = ckpt.load(args.checkpoint)
    corpus = load_corpus(args.dataset, args.tokenizer, max_vocab=params.config.vocab)
    spec = None
    if args.spec:
        spec = SubnetSpec.from_dict(json.loads(Path(args.spec).read_text())["spec"])
    elif args.ratio:
        spec = _spec_from_args(params.config, args.ratio, args.scope, args.seed, "masked")
    else:
        side = Path(str(args.checkpoint) + ".json")
        if side.is_file():
            spec = SubnetSpec.from_dict(json.loads(side.read_text())["spec"])
    res = evaluate(params, corpus.split(args.split), spec, seq_len=args.seq_len,
                   batch_size=args.batch_size, max_batches=args.max_batches)
    if args.json:
        print(json.dumps({"loss": res.loss, "perplexity": res.perplexity, "tokens": res.n_tokens}))
    else:
        print(f"loss={res.loss:.6f} perplexity={res.perplexity:.6f} tokens={res.n_tokens}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rows = mc_verify_ffn_scaling(args.d_model_ffn, args.d_inner_ffn, trials=args.trials,
                                 rng=np.random.default_rng([args.seed, 0]))
    rows += mc_verify_attn_scaling(args.tokens, args.d_model_attn, args.heads_attn, args.d_head_attn,
                                   trials=args.trials, rng=np.random.default_rng([args.seed, 1]))
    text = table_to_csv(rows)
    _emit(text, args.out)
    failed = [r for r in rows if not r.passed]
    if failed:
        for r in failed:
            print(f"FAIL {r.check} fraction={r.fraction:g} measured={r.measured:.6g} "
                  f"predicted={r.predicted:.6g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_cost(args) -> int:
    if args.curve:
        lines = ["model,positional,n_full,n_sub,ratio"]
        for pos in (True, False):
            for row in C.memory_ratio_curve(((n, C.PRESETS[n]) for n in C.GPT2_FAMILY),
                                            include_positional=pos):
                lines.append(f"{row['model']},{int(pos)},{row['n_full']},{row['n_sub']},{row['ratio']!r}")
        _emit("\n".join(lines) + "\n", args.out)
        return EXIT_OK
    if args.preset not in C.PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(C.PRESETS)}")
    cfg = C.PRESETS[args.preset]
    alpha = beta = 1
    if args.ratio:
        r = ratio_arg(args.ratio, cfg)
        alpha = [1 if l in cfg.shared_layers else r for l in range(cfg.L)]
        beta = alpha
    rep = C.count_params(cfg, alpha, beta, include_positional=not args.no_positional)
    lines = ["name,count"] + [f"{k},{v}" for k, v in rep.rows()]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _ratio_list(text: str, config: ModelConfig) -> list[Fraction]:
    return [ratio_arg(t, config) for t in str(text).split(",") if t.strip()]


def cmd_sweep(args) -> int:
    if args.kind == "stability":
        tw, _ = ckpt.load(args.twist)
        corpus = load_corpus(args.dataset, args.tokenizer, max_vocab=tw.config.vocab)
        res = stability_sweep(tw, args.dp, _ratio_list(args.ratios, tw.config), args.n, args.scope,
                              corpus.split(args.split), seed=args.seed, seq_len=args.seq_len,
                              batch_size=args.batch_size, max_batches=args.max_batches)
    else:
        paths = [Path(args.checkpoint_template.format(k=k)) if args.checkpoint_template else None
                 for k in args.train_ratios.split(",")]
        if args.checkpoints:
            paths = [Path(p) for p in args.checkpoints]
        if any(p is None for p in paths) or len(paths) != len(args.train_ratios.split(",")):
            raise UsageError("give one checkpoint per training ratio (--checkpoints or --checkpoint-template)")
        first, _ = ckpt.load(paths[0])
        corpus = load_corpus(args.dataset, args.tokenizer, max_vocab=first.config.vocab)
        train_ks = _ratio_list(args.train_ratios, first.config)
        res = robustness_grid(dict(zip(train_ks, paths)), _ratio_list(args.eval_ratios, first.config),
                              args.scope, corpus.split(args.split), n_subnets=args.n, seed=args.seed,
                              seq_len=args.seq_len, batch_size=args.batch_size,
                              max_batches=args.max_batches)
    out = Path(args.out) if args.out else output_root() / f"sweep-{args.kind}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    res.to_csv(out)
    sys.stdout.write(out.read_text())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _eval_opts(p):
    p.add_argument("--dataset", required=True)
    p.add_argument("--tokenizer", default="char", choices=["char", "byte"])
    p.add_argument("--split", default="valid", choices=["train", "valid", "test"])
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-batches", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twist", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train with TwIST or the data-parallel baseline")
    t.add_argument("--config", help="YAML/JSON file with model/train sections, or a run manifest")
    t.add_argument("--out")
    t.add_argument("--backend", choices=["twist", "data_parallel"])
    t.add_argument("--workers", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seq-len", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--interval", type=int, help="batches between repartitions")
    t.add_argument("--scope", choices=["attn", "ffn", "both"])
    t.add_argument("--ratio", help="training subnet ratio, e.g. 4/8")
    t.add_argument("--variant", choices=["masked", "physical", "hybrid"])
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset")
    t.add_argument("--tokenizer", choices=["char", "byte"])
    t.add_argument("--eval-every", type=int)
    t.add_argument("--eval-batches", type=int)
    t.add_argument("--common", help="comma-separated common blocks")
    t.add_argument("--threads", type=int)
    t.add_argument("--max-rounds", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--d-model", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--d-head", type=int)
    t.add_argument("--d-inner", type=int)
    t.add_argument("--ffn-blocks", type=int)
    t.add_argument("--vocab", type=int)
    t.add_argument("--context", type=int)
    t.add_argument("--shared-layers", help="comma-separated layer indices")
    t.add_argument("--activation", choices=["relu", "gelu"])
    t.add_argument("--untied", dest="tie_projection", action="store_const", const=False)
    t.add_argument("--no-scale-correction", dest="scale_correction", action="store_const", const=False)
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("extract", help="write a physically smaller random subnet checkpoint")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--ratio", required=True)
    x.add_argument("--scope", default="both", choices=["attn", "ffn", "both"])
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extract)

    e = sub.add_parser("eval", help="loss and perplexity of a checkpoint or one of its subnets")
    e.add_argument("--checkpoint", required=True)
    _eval_opts(e)
    e.add_argument("--ratio", help="sample a deployment subnet at this ratio")
    e.add_argument("--scope", default="both", choices=["attn", "ffn", "both"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--spec", help="JSON sidecar holding a subnet spec")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="Monte Carlo check of the subnet norm-scaling laws")
    v.add_argument("--trials", type=int, default=20_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--d-model-ffn", type=int, default=256)
    v.add_argument("--d-inner-ffn", type=int, default=1024)
    v.add_argument("--tokens", type=int, default=32)
    v.add_argument("--d-model-attn", type=int, default=512)
    v.add_argument("--heads-attn", type=int, default=8)
    v.add_argument("--d-head-attn", type=int, default=64)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("cost", help="parameter, memory and communication counts")
    c.add_argument("--preset", default="gpt2-small")
    c.add_argument("--ratio", help="keep this fraction of blocks on partitioned layers")
    c.add_argument("--no-positional", action="store_true")
    c.add_argument("--curve", action="store_true", help="subnet/full ratio across the GPT-2 family")
    c.add_argument("--out")
    c.set_defaults(func=cmd_cost)

    s = sub.add_parser("sweep", help="random-subnet evaluation sweeps")
    ssub = s.add_subparsers(dest="kind", required=True)
    st = ssub.add_parser("stability")
    st.add_argument("--twist", required=True)
    st.add_argument("--dp", required=True)
    st.add_argument("--ratios", default="4")
    rb = ssub.add_parser("robustness")
    rb.add_argument("--train-ratios", required=True)
    rb.add_argument("--eval-ratios", required=True)
    rb.add_argument("--checkpoints", nargs="+")
    rb.add_argument("--checkpoint-template", help="path with {k} replaced by each training ratio")
    for sp in (st, rb):
        _eval_opts(sp)
        sp.add_argument("--n", type=int, default=20)
        sp.add_argument("--scope", default="both", choices=["attn", "ffn", "both"])
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out")
        sp.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
