import numpy as np
import pytest

import oracles
from dvt import tensor as T
from dvt.cascade import named_parameters
from dvt.embed import TokenGridSpec, TokenSequence
from dvt.encoder import EncoderConfig, encoder_forward, init_head, init_layer, mlp_block, msa_block
from dvt.reuse import ReuseBundle
from dvt.tensor import ShapeError, Tensor


def random_layer(rng, d, hidden, cw=0, scale=0.5):
    layer = init_layer(rng, d, hidden, cw)
    for _, t in named_parameters(layer):
        t.data = rng.normal(0.0, scale, t.shape)
    return layer


def random_head(rng, d, classes):
    head = init_head(rng, d, classes)
    for _, t in named_parameters(head):
        t.data = rng.normal(0.0, 0.5, t.shape)
    return head


def test_msa_matches_loop():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 3))
        b, n = int(rng.integers(1, 3)), int(rng.integers(1, 11))
        z = rng.normal(size=(b, n, d))
        layer = random_layer(rng, d, 2 * d)
        inj = rng.normal(size=(b, heads, n, n)) if seed % 2 else None
        out, logits, attn = msa_block(Tensor(z), layer, heads, None if inj is None else Tensor(inj))
        ref_out, ref_logits = oracles.msa(z.tolist(), layer, heads, inj)
        assert np.abs(out.data - np.array(ref_out)).max() < 1e-9
        assert np.abs(logits.data - np.array(ref_logits)).max() < 1e-9
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


def test_mlp_matches_loop():
    for seed in range(50):
        rng = np.random.default_rng(100 + seed)
        d, cw = int(rng.integers(1, 9)), int(rng.integers(0, 4))
        b, n = int(rng.integers(1, 3)), int(rng.integers(1, 11))
        z = rng.normal(size=(b, n, d))
        layer = random_layer(rng, d, int(rng.integers(1, 9)), cw)
        ctx = rng.normal(size=(b, n, cw)) if cw else None
        norm = "joint" if seed % 3 == 0 else "split"
        out = mlp_block(Tensor(z), layer, None if ctx is None else Tensor(ctx), norm)
        ref = oracles.mlp(z.tolist(), layer, ctx, norm)
        assert np.abs(out.data - np.array(ref)).max() < 1e-9


def test_zero_injection_is_identity(rng):
    layer = random_layer(rng, 4, 8)
    z = Tensor(rng.normal(size=(2, 5, 4)))
    a, la, _ = msa_block(z, layer, 2)
    b, lb, _ = msa_block(z, layer, 2, Tensor(np.zeros((2, 2, 5, 5))))
    assert np.array_equal(a.data, b.data) and np.array_equal(la.data, lb.data)


def test_injection_shape_mismatch(rng):
    layer = random_layer(rng, 4, 8)
    with pytest.raises(ShapeError):
        msa_block(Tensor(rng.normal(size=(1, 5, 4))), layer, 2, Tensor(np.zeros((1, 2, 4, 4))))


def test_single_token_attention(rng):
    layer = random_layer(rng, 4, 8)
    z = rng.normal(size=(1, 1, 4))
    out, _, attn = msa_block(Tensor(z), layer, 2)
    assert np.all(attn.data == 1.0)
    h = T.layer_norm(Tensor(z), layer.ln1_gain, layer.ln1_bias)
    v = T.linear(h, layer.w_v, layer.b_v)
    expected = z + T.linear(v, layer.w_o, layer.b_o).data
    np.testing.assert_allclose(out.data, expected, atol=1e-14)


def test_mlp_context_rules(rng):
    z = Tensor(rng.normal(size=(1, 3, 4)))
    plain = random_layer(rng, 4, 8)
    with pytest.raises(ShapeError):
        mlp_block(z, plain, Tensor(np.zeros((1, 3, 2))))
    wide = random_layer(rng, 4, 8, cw=2)
    with pytest.raises(ShapeError):
        mlp_block(z, wide)
    with pytest.raises(ShapeError):
        mlp_block(z, wide, Tensor(np.zeros((1, 3, 3))))


def test_zero_mlp_is_residual(rng):
    layer = random_layer(rng, 4, 8)
    layer.w_fc2.data[:] = 0.0
    layer.b_fc2.data[:] = 0.0
    z = rng.normal(size=(2, 3, 4))
    assert np.array_equal(mlp_block(Tensor(z), layer).data, z)


def test_zero_context_split_norm_is_bitwise_identity(rng):
    """Context rows that are zero after LN contribute an exact 0 to fc1."""
    d, cw = 4, 3
    wide = random_layer(rng, d, 8, cw)
    wide.ln2_gain.data[d:] = 0.0
    wide.ln2_bias.data[d:] = 0.0
    narrow = init_layer(rng, d, 8)
    for (name, a), (_, b) in zip(named_parameters(narrow), named_parameters(wide)):
        a.data = b.data[:d] if name in ("ln2_gain", "ln2_bias", "w_fc1") else b.data
    z = Tensor(rng.normal(size=(2, 5, d)))
    ctx = Tensor(rng.normal(size=(2, 5, cw)))
    assert np.array_equal(mlp_block(z, wide, ctx).data, mlp_block(z, narrow).data)


def _tokens(rng, b, grid, d):
    return TokenSequence(Tensor(rng.normal(size=(b, grid.num_tokens, d))), grid)


def test_encoder_matches_loop():
    for seed in range(10):
        rng = np.random.default_rng(500 + seed)
        grid = TokenGridSpec(2, int(rng.integers(1, 3)), 1)
        cfg = EncoderConfig(layers=2, width=8, heads=2, mlp_ratio=1, context_width=2 * (seed % 2))
        layers = [random_layer(rng, 8, 8, cfg.context_width) for _ in range(2)]
        head = random_head(rng, 8, 3)
        tok = _tokens(rng, 2, grid, 8)
        n = grid.num_tokens
        bundle = None
        ctx = inj = None
        if cfg.context_width:
            ctx = [rng.normal(size=(2, n, 2)) for _ in range(2)]
            inj = [rng.normal(size=(2, 2, n, n)) for _ in range(2)]
            bundle = ReuseBundle([Tensor(c) for c in ctx], [Tensor(i) for i in inj])
        out = encoder_forward(tok, layers, head, cfg, bundle)
        ref_z, ref_logits, ref_cls = oracles.encoder(tok.tokens.data.tolist(), layers, head, 2, ctx, inj)
        assert np.abs(out.final_tokens.tokens.data - np.array(ref_z)).max() < 1e-8
        assert np.abs(out.class_logits.data - np.array(ref_cls)).max() < 1e-8
        for a, r in zip(out.per_layer_logits, ref_logits):
            assert np.abs(a.data - np.array(r)).max() < 1e-8
        for attn in out.per_layer_attention:
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


def test_single_layer_is_block_composition(rng):
    cfg = EncoderConfig(layers=1, width=4, heads=2)
    layer, head = random_layer(rng, 4, 16), random_head(rng, 4, 3)
    tok = _tokens(rng, 2, TokenGridSpec(2, 2, 1), 4)
    out = encoder_forward(tok, [layer], head, cfg)
    z, _, _ = msa_block(tok.tokens, layer, 2)
    z = mlp_block(z, layer)
    assert np.array_equal(out.final_tokens.tokens.data, z.data)


def test_permutation_equivariance(rng):
    cfg = EncoderConfig(layers=2, width=8, heads=2)
    layers = [random_layer(rng, 8, 32) for _ in range(2)]
    head = random_head(rng, 8, 4)
    grid = TokenGridSpec(2, 2, 1)
    tok = _tokens(rng, 1, grid, 8)
    perm = np.concatenate([[0], 1 + rng.permutation(4)])
    out = encoder_forward(tok, layers, head, cfg)
    pout = encoder_forward(TokenSequence(Tensor(tok.tokens.data[:, perm]), grid), layers, head, cfg)
    np.testing.assert_allclose(pout.final_tokens.tokens.data, out.final_tokens.tokens.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(pout.class_logits.data, out.class_logits.data, atol=1e-12)


def test_every_parameter_gets_gradient(rng):
    cfg = EncoderConfig(layers=2, width=8, heads=2, context_width=2)
    layers = [init_layer(rng, 8, 32, 2) for _ in range(2)]
    head = init_head(rng, 8, 3)
    grid = TokenGridSpec(2, 2, 1)
    bundle = ReuseBundle([Tensor(rng.normal(size=(2, 5, 2))) for _ in range(2)], None)
    out = encoder_forward(_tokens(rng, 2, grid, 8), layers, head, cfg, bundle)
    T.backward(T.cross_entropy(out.class_logits, [0, 2]))
    for name, p in named_parameters([layers, head]):
        assert np.linalg.norm(p.grad) > 0, name


def test_layer_count_checked(rng):
    cfg = EncoderConfig(layers=2, width=4, heads=2)
    with pytest.raises(ShapeError):
        encoder_forward(_tokens(rng, 1, TokenGridSpec(1, 1, 1), 4), [random_layer(rng, 4, 16)], random_head(rng, 4, 2), cfg)
    with pytest.raises(ValueError):
        EncoderConfig(layers=1, width=6, heads=4)
