"""Block pruning by empirical Fisher importance, the one-shot baseline."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import checkpoint as ckpt
from .. import model as M
from ..config import InvalidRatioError, SubnetSpec, kept_count, parse_ratio, scope_parts
from ..data import sequences
from ..tensor import Tensor


def block_fisher_scores(params: M.ParameterStore, tokens: np.ndarray, seq_len: int = 128,
                        batch_size: int = 8, max_batches: int | None = None) -> dict:
    """Mean over batches of summed squared gradients, per (layer, kind) block vector.

    Only partitioned layers are scored. One pass, in token order.
    """
    c = params.config
    seqs = sequences(np.asarray(tokens), min(seq_len, c.context))
    if len(seqs) == 0:
        raise ValueError("token stream too short for one window")
    if max_batches is not None:
        seqs = seqs[:max_batches * batch_size]
    scores = {(l, k): np.zeros(c.H if k == "attn" else c.R, np.float64)
              for l in c.partitioned_layers for k in ("attn", "ffn")}
    view = M.ParameterStore(c, {k: Tensor(v.data, requires_grad=True) for k, v in params.items()})
    n_batches = 0
    for i in range(0, len(seqs), batch_size):
        view.zero_grad()
        M.loss(view, seqs[i:i + batch_size]).backward()
        for (l, kind), s in scores.items():
            for name, axis, width in M.block_params(c, l, kind):
                g = view[name].grad.astype(np.float64)
                g2 = np.moveaxis(g * g, axis, 0)
                s += g2.reshape(len(s), width, -1).sum(axis=(1, 2))
        n_batches += 1
    view.zero_grad()
    return {k: v / n_batches for k, v in scores.items()}


def top_blocks(scores: np.ndarray, keep: int) -> tuple[int, ...]:
    """Indices of the ``keep`` largest scores; equal scores favour the lower index."""
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:keep]))


def fisher_block_prune(checkpoint, tokens: np.ndarray, ratio, scope: str = "both",
                       mode: str = "masked", **score_kw) -> SubnetSpec:
    params = checkpoint if isinstance(checkpoint, M.ParameterStore) else ckpt.load(Path(checkpoint))[0]
    c = params.config
    r = parse_ratio(ratio)
    do_attn, do_ffn = scope_parts(scope)
    k_attn, k_ffn = kept_count(r, c.H), kept_count(r, c.R)
    if (do_attn and k_attn == 0) or (do_ffn and k_ffn == 0):
        raise InvalidRatioError(f"ratio {r} keeps zero blocks")
    scores = block_fisher_scores(params, tokens, **score_kw) if r < 1 else {}
    attn, ffn = [], []
    for l in range(c.L):
        partitioned = l not in c.shared_layers and r < 1
        attn.append(top_blocks(scores[(l, "attn")], k_attn) if partitioned and do_attn
                    else tuple(range(c.H)))
        ffn.append(top_blocks(scores[(l, "ffn")], k_ffn) if partitioned and do_ffn
                   else tuple(range(c.R)))
    return SubnetSpec(tuple(attn), tuple(ffn), mode=mode, scope=scope,
                      scale_correction=c.scale_correction)
