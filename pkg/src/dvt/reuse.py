"""Cross-stage reuse: context embeddings from upstream tokens, and refined
upstream attention logits injected into downstream attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embed import TokenGridSpec, TokenSequence
from .optim import param, trunc_normal
from .tensor import ShapeError, Tensor


@dataclass
class FeatureReuseParams:
    """One f_l: LN then a two-layer GELU MLP, D -> hidden -> D'."""

    ln_gain: Tensor
    ln_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class RelationReuseParams:
    """Shared MLP over stacked attention channels, C -> 3C -> C with C = heads * layers."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def channels(self) -> int:
        return self.w1.shape[0]


@dataclass
class ReuseParams:
    feature: list[FeatureReuseParams] | None = None
    relation: RelationReuseParams | None = None


@dataclass
class ReuseBundle:
    """What a downstream encoder consumes: per-layer contexts and injected logits."""

    context: list[Tensor] | None = None
    injected: list[Tensor] | None = None


def init_feature_reuse(
    rng: np.random.Generator, layers: int, width: int, hidden: int, context_width: int
) -> list[FeatureReuseParams]:
    return [
        FeatureReuseParams(
            ln_gain=param(np.ones(width)),
            ln_bias=param(np.zeros(width)),
            w1=param(trunc_normal(rng, (width, hidden))),
            b1=param(np.zeros(hidden)),
            w2=param(trunc_normal(rng, (hidden, context_width))),
            b2=param(np.zeros(context_width)),
        )
        for _ in range(layers)
    ]


def init_relation_reuse(rng: np.random.Generator, heads: int, layers: int) -> RelationReuseParams:
    c = heads * layers
    return RelationReuseParams(
        w1=param(trunc_normal(rng, (c, 3 * c))),
        b1=param(np.zeros(3 * c)),
        w2=param(trunc_normal(rng, (3 * c, c))),
        b2=param(np.zeros(c)),
    )


def _check_grids(up: TokenGridSpec | tuple, down: TokenGridSpec | tuple) -> tuple:
    uh, uw = up.shape if isinstance(up, TokenGridSpec) else up
    dh, dw = down.shape if isinstance(down, TokenGridSpec) else down
    if dh < uh or dw < uw:
        raise ValueError(f"cannot upsample a {uh}x{uw} grid to {dh}x{dw}")
    return (uh, uw), (dh, dw)


def build_context(
    z_up: TokenSequence, down_grid: TokenGridSpec, params: list[FeatureReuseParams]
) -> list[Tensor]:
    """Per-layer context embeddings E_l [B, N_down, D'] from upstream final tokens.

    Row 0 (classification token) of every E_l is exactly zero.
    """
    (uh, uw), (dh, dw) = _check_grids(z_up.grid, down_grid)
    z = z_up.tokens
    b, n, _ = z.shape
    image = T.index(z, (slice(None), slice(1, None), slice(None)))
    out = []
    for f in params:
        h = T.layer_norm(image, f.ln_gain, f.ln_bias)
        h = T.linear(T.gelu(T.linear(h, f.w1, f.b1)), f.w2, f.b2)
        cw = h.shape[-1]
        h = T.bilinear_upsample_grid(T.reshape(h, (b, uh, uw, cw)), (dh, dw))
        h = T.reshape(h, (b, dh * dw, cw))
        out.append(T.concat([Tensor(np.zeros((b, 1, cw))), h], axis=1))
    return out


def concat_upstream_logits(per_layer: list[Tensor]) -> Tensor:
    """[B, heads, N, N] per layer -> [B, N, N, heads * layers], layer-major channels."""
    if not per_layer:
        raise ShapeError("no attention logits to concatenate")
    first = per_layer[0].shape
    for a in per_layer:
        if a.ndim != 4 or a.shape != first or a.shape[2] != a.shape[3]:
            raise ShapeError(f"inconsistent attention logits: {[x.shape for x in per_layer]}")
    return T.transpose(T.concat(per_layer, axis=1), (0, 2, 3, 1))


def split_upstream_logits(stack: Tensor, heads: int) -> list[Tensor]:
    c = stack.shape[-1]
    if c % heads:
        raise ShapeError(f"{c} channels do not split into groups of {heads}")
    chans = T.transpose(stack, (0, 3, 1, 2))
    return T.split(chans, [heads] * (c // heads), axis=1)


def _upsample_lines(x: Tensor, up: tuple, down: tuple) -> Tensor:
    """Resize the last axis, read as a row-major up-grid, to the down-grid."""
    lead = x.shape[:-1]
    g = T.reshape(x, lead + (up[0], up[1], 1))
    g = T.bilinear_upsample_grid(g, down)
    return T.reshape(g, lead + (down[0] * down[1],))


def attention_grid_upsample(
    amap: Tensor, up_grid, down_grid, order: str = "rows_first"
) -> Tensor:
    """Resize [B, C, 1+HW, 1+HW] attention maps to [B, C, 1+H'W', 1+H'W'].

    The patch-patch block is resized along one token axis and then the other,
    each time reading that axis as an HxW image. The class-token row and
    column segments are resized the same way; the class-class entry is kept.
    """
    up, down = _check_grids(up_grid, down_grid)
    ns = up[0] * up[1] + 1
    if amap.ndim != 4 or amap.shape[2:] != (ns, ns):
        raise ShapeError(f"map {amap.shape} does not match a {up[0]}x{up[1]} grid")
    if up == down:
        return T.reshape(amap, amap.shape)
    if order not in ("rows_first", "cols_first"):
        raise ValueError(f"unknown order {order!r}")
    sl = slice(None)
    corner = T.index(amap, (sl, sl, slice(0, 1), slice(0, 1)))
    cls_row = T.index(amap, (sl, sl, slice(0, 1), slice(1, None)))
    cls_col = T.index(amap, (sl, sl, slice(1, None), slice(0, 1)))
    block = T.index(amap, (sl, sl, slice(1, None), slice(1, None)))

    def along_rows(x):  # resize the second-to-last axis
        return T.transpose(_upsample_lines(T.transpose(x, (0, 1, 3, 2)), up, down), (0, 1, 3, 2))

    def along_cols(x):  # resize the last axis
        return _upsample_lines(x, up, down)

    if order == "rows_first":
        block = along_cols(along_rows(block))
    else:
        block = along_rows(along_cols(block))
    cls_row = along_cols(cls_row)
    cls_col = along_rows(cls_col)
    top = T.concat([corner, cls_row], axis=3)
    bottom = T.concat([cls_col, block], axis=3)
    return T.concat([top, bottom], axis=2)


def transform_relationships(
    stack: Tensor,
    params: RelationReuseParams,
    up_grid: TokenGridSpec,
    down_grid: TokenGridSpec,
    heads: int,
) -> list[Tensor]:
    """Refine A^up with the shared MLP, then resize to the downstream token count.

    Returns one [B, heads, N_down, N_down] tensor per downstream layer.
    """
    c = stack.shape[-1]
    if c != params.channels:
        raise ShapeError(f"stack has {c} channels, relation MLP expects {params.channels}")
    h = T.gelu(T.linear(stack, params.w1, params.b1))
    h = T.linear(h, params.w2, params.b2)
    h = attention_grid_upsample(T.transpose(h, (0, 3, 1, 2)), up_grid, down_grid)
    return T.split(h, [heads] * (c // heads), axis=1)


def make_bundle(
    upstream,
    up_grid: TokenGridSpec,
    down_grid: TokenGridSpec,
    params: ReuseParams,
    heads: int,
) -> ReuseBundle:
    """Assemble the downstream ReuseBundle from an upstream EncoderOutput."""
    bundle = ReuseBundle()
    if params.feature is not None:
        bundle.context = build_context(upstream.final_tokens, down_grid, params.feature)
    if params.relation is not None:
        stack = concat_upstream_logits(upstream.per_layer_logits)
        bundle.injected = transform_relationships(stack, params.relation, up_grid, down_grid, heads)
    return bundle
