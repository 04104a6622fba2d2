import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dvt.cascade import named_parameters
from dvt.embed import TokenGridSpec, TokenSequence
from dvt.reuse import (
    RelationReuseParams,
    attention_grid_upsample,
    build_context,
    concat_upstream_logits,
    init_feature_reuse,
    init_relation_reuse,
    split_upstream_logits,
    transform_relationships,
)
from dvt.tensor import ShapeError, Tensor


def randomise(obj, rng, scale=0.5):
    for _, t in named_parameters(obj):
        t.data = rng.normal(0.0, scale, t.shape)
    return obj


def random_grids(rng, max_side=3):
    uh, uw = int(rng.integers(1, max_side)), int(rng.integers(1, max_side))
    dh, dw = uh + int(rng.integers(0, 2)), uw + int(rng.integers(0, 2))
    return TokenGridSpec(uh, uw, 1), TokenGridSpec(dh, dw, 1)


def test_build_context_matches_loop():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        up, down = random_grids(rng)
        d, hid, cw, layers = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 4)), 2
        params = randomise(init_feature_reuse(rng, layers, d, hid, cw), rng)
        z = rng.normal(size=(2, up.num_tokens, d))
        got = build_context(TokenSequence(Tensor(z), up), down, params)
        ref = oracles.build_context(z.tolist(), up.shape, down.shape, params)
        for g, r in zip(got, ref):
            assert g.shape == (2, down.num_tokens, cw)
            assert np.abs(g.data - np.array(r)).max() < 1e-9
            assert np.all(g.data[:, 0] == 0.0)


def test_build_context_equal_grids_and_constant(rng):
    grid = TokenGridSpec(2, 3, 1)
    params = randomise(init_feature_reuse(rng, 1, 4, 5, 2), rng)
    z = rng.normal(size=(1, 7, 4))
    got = build_context(TokenSequence(Tensor(z), grid), grid, params)[0].data
    ref = oracles.build_context(z.tolist(), (2, 3), (2, 3), params)[0]
    assert np.abs(got - np.array(ref)).max() < 1e-12
    const = np.broadcast_to(rng.normal(size=4), (1, 5, 4)).copy()
    out = build_context(TokenSequence(Tensor(const), TokenGridSpec(2, 2, 1)), TokenGridSpec(4, 4, 1), params)[0].data
    np.testing.assert_allclose(out[0, 1:], np.broadcast_to(out[0, 1], (16, 2)), atol=1e-13)


def test_build_context_rejects_downsampling(rng):
    params = init_feature_reuse(rng, 1, 4, 5, 2)
    with pytest.raises(ValueError):
        build_context(TokenSequence(Tensor(np.zeros((1, 10, 4))), TokenGridSpec(3, 3, 1)), TokenGridSpec(2, 3, 1), params)


def test_concat_order_and_roundtrip(rng):
    l1, l2 = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
    stack = concat_upstream_logits([Tensor(l1), Tensor(l2)])
    assert stack.shape == (1, 3, 3, 4)
    for c, src in enumerate([l1[:, 0], l1[:, 1], l2[:, 0], l2[:, 1]]):
        assert np.array_equal(stack.data[..., c], src)
    back = split_upstream_logits(stack, 2)
    assert np.array_equal(back[0].data, l1) and np.array_equal(back[1].data, l2)
    single = concat_upstream_logits([Tensor(l1)])
    assert np.array_equal(single.data, l1.transpose(0, 2, 3, 1))
    with pytest.raises(ShapeError):
        concat_upstream_logits([Tensor(l1), Tensor(np.zeros((1, 2, 4, 4)))])


def test_attention_upsample_matches_loop():
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        up, down = random_grids(rng, 4)
        amap = rng.normal(size=(1, 2, up.num_tokens, up.num_tokens))
        got = attention_grid_upsample(Tensor(amap), up, down).data
        ref = np.array(oracles.attention_upsample(amap.tolist(), up.shape, down.shape))
        assert got.shape == (1, 2, down.num_tokens, down.num_tokens)
        assert np.abs(got - ref).max() < 1e-9


def test_attention_upsample_named_example(rng):
    amap = rng.normal(size=(1, 1, 5, 5))
    got = attention_grid_upsample(Tensor(amap), (2, 2), (3, 3)).data
    assert got.shape == (1, 1, 10, 10)
    assert np.abs(got - np.array(oracles.attention_upsample(amap.tolist(), (2, 2), (3, 3)))).max() < 1e-9
    assert got[0, 0, 0, 0] == amap[0, 0, 0, 0]


def test_attention_upsample_identity_constant_and_order(rng):
    amap = rng.normal(size=(2, 3, 7, 7))
    assert np.array_equal(attention_grid_upsample(Tensor(amap), (2, 3), (2, 3)).data, amap)
    const = np.full((1, 1, 2, 2), 1.7)
    assert np.allclose(attention_grid_upsample(Tensor(const), (1, 1), (2, 2)).data[0, 0, 1:, 1:], 1.7)
    a = attention_grid_upsample(Tensor(amap), (2, 3), (4, 5), order="rows_first").data
    b = attention_grid_upsample(Tensor(amap), (2, 3), (4, 5), order="cols_first").data
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ShapeError):
        attention_grid_upsample(Tensor(amap), (2, 2), (3, 3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_attention_upsample_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(1, 2, 5, 5))
    up = lambda m: attention_grid_upsample(Tensor(m), (2, 2), (3, 4)).data  # noqa: E731
    np.testing.assert_allclose(up(alpha * x + beta * y), alpha * up(x) + beta * up(y), atol=1e-10)


def test_transform_relationships_matches_loop():
    for seed in range(50):
        rng = np.random.default_rng(2000 + seed)
        up, down = random_grids(rng)
        heads, layers = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        rel = randomise(init_relation_reuse(rng, heads, layers), rng)
        stack = rng.normal(size=(1, up.num_tokens, up.num_tokens, heads * layers))
        got = transform_relationships(Tensor(stack), rel, up, down, heads)
        ref = oracles.transform_relationships(stack.tolist(), rel, up.shape, down.shape, heads)
        assert len(got) == layers
        for g, r in zip(got, ref):
            assert g.shape == (1, heads, down.num_tokens, down.num_tokens)
            assert np.abs(g.data - np.array(r)).max() < 1e-9


def test_zero_relation_mlp_gives_zero_injection(rng):
    rel = init_relation_reuse(rng, 2, 2)
    for _, t in named_parameters(rel):
        t.data = np.zeros(t.shape)
    stack = Tensor(rng.normal(size=(1, 5, 5, 4)))
    for inj in transform_relationships(stack, rel, (2, 2), (4, 4), 2):
        assert np.all(inj.data == 0.0)


def test_identity_wiring_on_equal_grids(rng):
    heads, layers = 2, 2
    c = heads * layers
    shift = 50.0  # gelu(x + 50) == x + 50 in float64 for |x| small
    w1 = np.zeros((c, 3 * c))
    w1[:, :c] = np.eye(c)
    w2 = np.zeros((3 * c, c))
    w2[:c] = np.eye(c)
    rel = RelationReuseParams(Tensor(w1), Tensor(np.full(3 * c, shift)), Tensor(w2), Tensor(np.full(c, -shift)))
    logits = [rng.normal(size=(1, heads, 5, 5)) for _ in range(layers)]
    stack = concat_upstream_logits([Tensor(a) for a in logits])
    out = transform_relationships(stack, rel, (2, 2), (2, 2), heads)
    for o, a in zip(out, logits):
        np.testing.assert_allclose(o.data, a, atol=1e-12)


def test_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        transform_relationships(Tensor(np.zeros((1, 5, 5, 3))), init_relation_reuse(rng, 2, 2), (2, 2), (3, 3), 2)
