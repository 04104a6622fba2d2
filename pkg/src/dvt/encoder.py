"""Pre-LN transformer encoder with hooks for feature and relationship reuse."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embed import TokenSequence
from .optim import param, trunc_normal
from .tensor import ShapeError, Tensor

CONTEXT_NORMS = ("split", "joint")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    width: int
    heads: int
    mlp_ratio: int = 4
    context_width: int = 0
    # "split": token and context halves get their own LN statistics;
    # "joint": one LN over the whole D + D' concatenation.
    context_norm: str = "split"

    def __post_init__(self):
        if min(self.layers, self.width, self.heads, self.mlp_ratio) <= 0:
            raise ValueError("layers, width, heads and mlp_ratio must be positive")
        if self.width % self.heads:
            raise ValueError(f"heads={self.heads} must divide width={self.width}")
        if self.context_width < 0:
            raise ValueError("context_width must be >= 0")
        if self.context_norm not in CONTEXT_NORMS:
            raise ValueError(f"context_norm must be one of {CONTEXT_NORMS}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.width


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor  # [D + D']
    ln2_bias: Tensor  # [D + D']
    w_fc1: Tensor  # [D + D', hidden]
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @property
    def context_width(self) -> int:
        return self.w_fc1.shape[0] - self.width


@dataclass
class HeadParams:
    ln_gain: Tensor
    ln_bias: Tensor
    weight: Tensor
    bias: Tensor


@dataclass
class EncoderOutput:
    final_tokens: TokenSequence
    per_layer_logits: list[Tensor]  # [B, heads, N, N], before any injection
    class_logits: Tensor
    per_layer_attention: list[Tensor] = field(default_factory=list)


def init_layer(
    rng: np.random.Generator,
    width: int,
    hidden: int,
    context_width: int = 0,
    context_rng: np.random.Generator | None = None,
) -> LayerParams:
    """Initialise one layer; context-only weight rows come from ``context_rng``.

    Keeping the context rows on their own stream means a reuse-enabled stage
    and a reuse-free stage built from the same seed share every other weight.
    """
    d = width

    def proj():
        return param(trunc_normal(rng, (d, d)))

    w_q, w_k, w_v, w_o = proj(), proj(), proj(), proj()
    fc1 = trunc_normal(rng, (d, hidden))
    fc2 = trunc_normal(rng, (hidden, d))
    if context_width:
        ctx_rng = context_rng if context_rng is not None else rng
        fc1 = np.concatenate([fc1, trunc_normal(ctx_rng, (context_width, hidden))])
    wide = d + context_width
    return LayerParams(
        ln1_gain=param(np.ones(d)),
        ln1_bias=param(np.zeros(d)),
        w_q=w_q,
        b_q=param(np.zeros(d)),
        w_k=w_k,
        b_k=param(np.zeros(d)),
        w_v=w_v,
        b_v=param(np.zeros(d)),
        w_o=w_o,
        b_o=param(np.zeros(d)),
        ln2_gain=param(np.ones(wide)),
        ln2_bias=param(np.zeros(wide)),
        w_fc1=param(fc1),
        b_fc1=param(np.zeros(hidden)),
        w_fc2=param(fc2),
        b_fc2=param(np.zeros(d)),
    )


def init_head(rng: np.random.Generator, width: int, classes: int) -> HeadParams:
    return HeadParams(
        ln_gain=param(np.ones(width)),
        ln_bias=param(np.zeros(width)),
        weight=param(trunc_normal(rng, (width, classes))),
        bias=param(np.zeros(classes)),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def msa_block(
    z: Tensor,
    params: LayerParams,
    heads: int,
    injected_logits: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Pre-LN multi-head self-attention with residual.

    Returns ``(z + MSA(LN(z)), logits, attention)``. ``logits`` is the scaled
    ``QK^T / sqrt(d)`` *before* ``injected_logits`` is added; ``attention`` is
    the softmax actually applied to the values.
    """
    b, n, d = z.shape
    if d % heads:
        raise ShapeError(f"heads={heads} does not divide width {d}")
    h = T.layer_norm(z, params.ln1_gain, params.ln1_bias)
    q = _split_heads(T.linear(h, params.w_q, params.b_q), heads)
    k = _split_heads(T.linear(h, params.w_k, params.b_k), heads)
    v = _split_heads(T.linear(h, params.w_v, params.b_v), heads)
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // heads))
    scores = logits
    if injected_logits is not None:
        if injected_logits.shape != logits.shape:
            raise ShapeError(
                f"injected logits {injected_logits.shape} != attention logits {logits.shape}"
            )
        scores = logits + injected_logits
    attn = T.softmax(scores, axis=-1)
    out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
    out = T.linear(T.reshape(out, (b, n, d)), params.w_o, params.b_o)
    return z + out, logits, attn


def mlp_block(
    z: Tensor,
    params: LayerParams,
    context: Tensor | None = None,
    context_norm: str = "split",
) -> Tensor:
    """``z + MLP(LN([z || context]))``; the residual only ever carries ``z``."""
    d = z.shape[-1]
    cw = params.context_width
    if (context is None) != (cw == 0):
        raise ShapeError(
            f"layer expects {'a' if cw else 'no'} context of width {cw}, "
            f"got {None if context is None else context.shape}"
        )
    if context is None:
        h = T.layer_norm(z, params.ln2_gain, params.ln2_bias)
        h = T.linear(h, params.w_fc1, params.b_fc1)
    else:
        if context.shape != z.shape[:-1] + (cw,):
            raise ShapeError(f"context {context.shape} != {z.shape[:-1] + (cw,)}")
        if context_norm == "joint":
            h = T.layer_norm(T.concat([z, context], axis=-1), params.ln2_gain, params.ln2_bias)
            h = T.linear(h, params.w_fc1, params.b_fc1)
        else:
            g_z, g_c = T.split(params.ln2_gain, [d, cw], axis=0)
            b_z, b_c = T.split(params.ln2_bias, [d, cw], axis=0)
            w_z, w_c = T.split(params.w_fc1, [d, cw], axis=0)
            hz = T.layer_norm(z, g_z, b_z)
            hc = T.layer_norm(context, g_c, b_c)
            # Same op order as the context-free branch so a zero context is
            # a bitwise no-op.
            h = T.linear(hz, w_z) + T.linear(hc, w_c) + params.b_fc1
    h = T.gelu(h)
    return z + T.linear(h, params.w_fc2, params.b_fc2)


def classify(tokens: Tensor, head: HeadParams) -> Tensor:
    cls = T.index(tokens, (slice(None), 0, slice(None)))
    return T.linear(T.layer_norm(cls, head.ln_gain, head.ln_bias), head.weight, head.bias)


def encoder_forward(
    tokens: TokenSequence,
    layers: list[LayerParams],
    head: HeadParams,
    config: EncoderConfig,
    reuse=None,
) -> EncoderOutput:
    """Run ``config.layers`` MSA/MLP pairs then the classifier head.

    ``reuse`` is a :class:`dvt.reuse.ReuseBundle` (or None); its ``context``
    feeds each MLP block and its ``injected`` logits each attention block.
    """
    if len(layers) != config.layers:
        raise ShapeError(f"{len(layers)} layer params for a {config.layers}-layer encoder")
    context = getattr(reuse, "context", None)
    injected = getattr(reuse, "injected", None)
    for name, seq in (("context", context), ("injected", injected)):
        if seq is not None and len(seq) != config.layers:
            raise ShapeError(f"reuse {name} has {len(seq)} entries, need {config.layers}")
    z = tokens.tokens
    logits, attention = [], []
    for i, layer in enumerate(layers):
        z, a, p = msa_block(z, layer, config.heads, None if injected is None else injected[i])
        logits.append(a)
        attention.append(p)
        z = mlp_block(z, layer, None if context is None else context[i], config.context_norm)
    return EncoderOutput(
        final_tokens=TokenSequence(z, tokens.grid),
        per_layer_logits=logits,
        class_logits=classify(z, head),
        per_layer_attention=attention,
    )
