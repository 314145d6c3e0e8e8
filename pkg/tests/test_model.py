import math
import struct

import numpy as np
import pytest
from fractions import Fraction

from twist import checkpoint as ckpt
from twist import model as M
from twist import tensor as T
from twist.analysis.cost import count_params
from twist.config import InvalidSpecError, ModelConfig, SubnetSpec
from twist.tensor import Rng, Tensor

from conftest import rel_err, tiny_config


def random_spec(config, rng, mode="masked"):
    attn, ffn = [], []
    for l in range(config.L):
        if l in config.shared_layers:
            attn.append(tuple(range(config.H)))
            ffn.append(tuple(range(config.R)))
        else:
            attn.append(tuple(rng.choice(config.H, rng.integers(1, config.H + 1), replace=False)))
            ffn.append(tuple(rng.choice(config.R, rng.integers(1, config.R + 1), replace=False)))
    return SubnetSpec(tuple(attn), tuple(ffn), mode=mode, scale_correction=config.scale_correction)


def tokens(config, B=2, N=None, seed=0):
    N = N or config.context
    return np.random.default_rng(seed).integers(0, config.vocab, (B, N))


# ---------------------------------------------------------------- init

def test_init_variances_and_constants():
    cfg = ModelConfig(L=1, d_model=256, H=4, d_head=64, d_inner=1024, R=4, shared_layers=())
    p = M.init_params(cfg, Rng(0))
    assert p["h0.attn.wq"].data.var() == pytest.approx(1 / 256, rel=0.05)
    assert p["h0.attn.wc"].data.var() == pytest.approx(1 / 256, rel=0.05)
    assert p["h0.ffn.w"].data.var() == pytest.approx(2 / 256, rel=0.05)
    assert p["h0.ffn.c"].data.var() == pytest.approx(1 / 1024, rel=0.05)
    for name in ("h0.ln1.g", "h0.ln2.g", "lnf.g"):
        assert np.all(p[name].data == 1.0)
    for name in ("h0.ln1.b", "h0.attn.bq", "h0.attn.bc", "h0.ffn.b", "h0.ffn.bc", "lnf.b"):
        assert np.all(p[name].data == 0.0)


def test_init_is_deterministic(tiny):
    assert M.init_params(tiny, Rng(3)).equal(M.init_params(tiny, Rng(3)))
    assert not M.init_params(tiny, Rng(3)).equal(M.init_params(tiny, Rng(4)))


def test_tied_store_has_no_projection(tiny):
    assert "proj" not in M.init_params(tiny, Rng(0))
    untied = M.init_params(tiny.replace(tie_projection=False), Rng(0))
    assert untied["proj"].shape == (tiny.d_model, tiny.vocab)


def test_untrained_perplexity_near_vocab(tiny):
    p = M.init_params(tiny, Rng(0))
    ppl = math.exp(M.loss(p, tokens(tiny, B=8, N=tiny.context + 1)[:, :]).item())
    assert ppl == pytest.approx(tiny.vocab, rel=0.10)


def test_ffn_output_variance_at_init():
    cfg = ModelConfig(L=1, d_model=512, H=8, d_head=64, d_inner=2048, R=8, shared_layers=())
    p = M.init_params(cfg, Rng(1))
    x = np.random.default_rng(0).standard_normal((20_000, 512)).astype(np.float32)
    y = M.ffn_sublayer(p, 0, Tensor(x)).data.astype(np.float64)
    assert y.var() == pytest.approx(1.0, rel=0.10)


# ---------------------------------------------------------------- forward

def test_full_subnet_is_bitwise_plain_forward(tiny):
    p = M.init_params(tiny, Rng(0))
    ids = tokens(tiny)
    a = M.forward(p, ids).data
    b = M.forward(p, ids, SubnetSpec.full(tiny)).data
    assert np.array_equal(a, b)


def test_causality(tiny):
    p = M.init_params(tiny, Rng(0))
    ids = tokens(tiny, B=1)
    t = 11
    other = ids.copy()
    other[0, t + 1:] = (other[0, t + 1:] + 7) % tiny.vocab
    assert np.array_equal(M.forward(p, ids).data[0, :t + 1], M.forward(p, other).data[0, :t + 1])


def test_forward_input_validation(tiny):
    p = M.init_params(tiny, Rng(0))
    with pytest.raises(T.InvalidInputError):
        M.forward(p, [[0, tiny.vocab]])
    with pytest.raises(T.InvalidInputError):
        M.forward(p, np.zeros((1, tiny.context + 1), int))


def test_scale_factor_applied_to_narrowed_sublayer():
    cfg = tiny_config(shared_layers=(), L=1)
    p = M.init_params(cfg, Rng(0))
    x = Tensor(np.random.default_rng(0).standard_normal((1, 5, cfg.d_model)))
    mask = np.array([1, 0, 0, 0], np.float32)
    plain = M.ffn_sublayer(p, 0, x, mask).data
    spec = SubnetSpec(((0, 1, 2, 3),), ((0,),), scale_correction=True)
    m, factor = M._sublayer_plan(p, 0, "ffn", spec.ffn[0], True)
    assert factor == pytest.approx(2.0)
    np.testing.assert_allclose(M.ffn_sublayer(p, 0, x, m, factor).data, 2 * plain, rtol=1e-6)


# ---------------------------------------------------------------- masked vs physical

@pytest.mark.parametrize("seed", range(8))
def test_masked_physical_duality(seed):
    cfg = tiny_config(L=3, shared_layers=(0,))
    rng = np.random.default_rng(seed)
    p = M.init_params(cfg, Rng(seed))
    spec = random_spec(cfg, rng)
    phys = M.extract_physical_subnet(p, spec)
    batch = tokens(cfg, N=cfg.context + 1, seed=seed)[:, :cfg.context + 1]
    lm = M.forward(p, batch[:, :-1], spec).data
    lp = M.forward(phys, batch[:, :-1], spec.with_mode("physical")).data
    assert np.abs(lm - lp).max() < 1e-4

    M.loss(p, batch, spec).backward()
    M.loss(phys, batch, spec.with_mode("physical")).backward()
    for l in range(cfg.L):
        for kind, kept in (("attn", spec.attn[l]), ("ffn", spec.ffn[l])):
            params = M.block_params(cfg, l, kind)
            # compare per block: all slices a block owns, concatenated
            for i, b in enumerate(kept):
                masked = np.concatenate([M.take_blocks(p[n].grad, ax, [b], w).ravel()
                                         for n, ax, w in params])
                physical = np.concatenate([M.take_blocks(phys[n].grad, ax, [i], w).ravel()
                                           for n, ax, w in params])
                assert rel_err(masked, physical) < 1e-3
            n_full = cfg.H if kind == "attn" else cfg.R
            dropped = [b for b in range(n_full) if b not in kept]
            for n, ax, w in params:
                if dropped:
                    assert np.all(M.take_blocks(p[n].grad, ax, dropped, w) == 0)


# ---------------------------------------------------------------- extraction

def test_extract_keep_all_is_deep_copy(tiny):
    p = M.init_params(tiny, Rng(0))
    q = M.extract_physical_subnet(p, SubnetSpec.full(tiny))
    assert q.equal(p)
    assert all(q[k].data is not p[k].data for k in p)


def test_extract_single_head_slices_columns():
    cfg = tiny_config(shared_layers=(0,))
    p = M.init_params(cfg, Rng(0))
    spec = SubnetSpec.full(cfg)
    spec = SubnetSpec(spec.attn[:1] + ((0,),) * 3, spec.ffn)
    q = M.extract_physical_subnet(p, spec)
    assert np.array_equal(q["h1.attn.wq"].data, p["h1.attn.wq"].data[:, :cfg.d_head])
    assert np.array_equal(q["h1.attn.wc"].data, p["h1.attn.wc"].data[:cfg.d_head])
    assert q["h0.attn.wq"].shape == p["h0.attn.wq"].shape


def test_extract_count_matches_cost_model():
    cfg = ModelConfig(L=4, d_model=48, H=12, d_head=4, d_inner=96, R=12, vocab=30, context=16,
                      shared_layers=(0, 3))
    p = M.init_params(cfg, Rng(0))
    half = tuple(range(0, 12, 2))
    spec = SubnetSpec(tuple(tuple(range(12)) if l in cfg.shared_layers else half for l in range(4)),
                      tuple(tuple(range(12)) if l in cfg.shared_layers else half for l in range(4)))
    r = Fraction(6, 12)
    ab = [1 if l in cfg.shared_layers else r for l in range(4)]
    assert M.extract_physical_subnet(p, spec).num_params() == count_params(cfg, ab, ab).N_model


def test_extract_errors(tiny):
    p = M.init_params(tiny, Rng(0))
    full = SubnetSpec.full(tiny)
    empty = SubnetSpec(full.attn[:1] + ((),) + full.attn[2:], full.ffn)
    with pytest.raises(InvalidSpecError):
        M.extract_physical_subnet(p, empty)
    narrowed_shared = SubnetSpec(((0,),) + full.attn[1:], full.ffn)
    with pytest.raises(InvalidSpecError):
        M.extract_physical_subnet(p, narrowed_shared)


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bytes(tiny, tmp_path):
    p = M.init_params(tiny, Rng(0))
    blob = ckpt.dumps(p)
    q, meta = ckpt.loads(blob)
    assert q.equal(p) and q.config == tiny and meta == {}
    assert ckpt.dumps(q) == blob
    path = ckpt.save(p, tmp_path / "m.twst", {"note": 1})
    assert ckpt.load(path)[1] == {"note": 1}


def test_checkpoint_format_errors(tiny):
    blob = ckpt.dumps(M.init_params(tiny, Rng(0)))
    with pytest.raises(ckpt.CheckpointFormatError):
        ckpt.loads(b"XXXX" + blob[4:])
    with pytest.raises(ckpt.CheckpointFormatError, match="version"):
        ckpt.loads(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(ckpt.CheckpointFormatError):
        ckpt.loads(blob + b"\0")
