"""K-stage cascade of encoders over increasingly fine token grids."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .embed import EmbedParams, TokenGridSpec, init_embed, tokenize
from .encoder import (
    EncoderConfig,
    EncoderOutput,
    HeadParams,
    LayerParams,
    encoder_forward,
    init_head,
    init_layer,
)
from .optim import Adam
from .reuse import ReuseParams, init_feature_reuse, init_relation_reuse, make_bundle
from .tensor import NonFiniteError, Tensor


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class CascadeConfig:
    grids: tuple[TokenGridSpec, ...]
    encoder: EncoderConfig
    classes: int
    channels: int = 1
    feature_reuse: bool = True
    relationship_reuse: bool = True
    reuse_hidden: int | None = None  # hidden width of each f_l; default 2 * D

    def __post_init__(self):
        grids = tuple(self.grids)
        object.__setattr__(self, "grids", grids)
        if not grids:
            raise ValueError("a cascade needs at least one stage")
        if self.classes <= 0 or self.channels <= 0:
            raise ValueError("classes and channels must be positive")
        sizes = {g.image_hw for g in grids}
        if len(sizes) != 1:
            raise ValueError(f"all stages must see the same image size, got {sorted(sizes)}")
        for a, b in zip(grids, grids[1:]):
            if b.num_tokens <= a.num_tokens:
                raise ValueError("token grids must strictly increase in token count")
            if b.grid_h < a.grid_h or b.grid_w < a.grid_w:
                raise ValueError(f"grid {b.shape} cannot be reached by upsampling {a.shape}")
        if self.feature_reuse and len(grids) > 1 and self.encoder.context_width <= 0:
            raise ValueError("feature reuse needs encoder.context_width > 0")

    @property
    def num_stages(self) -> int:
        return len(self.grids)

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.grids[0].image_hw

    @property
    def context_hidden(self) -> int:
        return self.reuse_hidden if self.reuse_hidden else 2 * self.encoder.width

    def stage_encoder(self, i: int) -> EncoderConfig:
        """Encoder config of stage ``i``; only downstream stages carry context."""
        cw = self.encoder.context_width if (i > 0 and self.feature_reuse) else 0
        return dataclasses.replace(self.encoder, context_width=cw)

    def reuse_active(self, i: int) -> bool:
        return i > 0 and (self.feature_reuse or self.relationship_reuse)


@dataclass
class StageParams:
    embed: EmbedParams
    layers: list[LayerParams]
    head: HeadParams


@dataclass
class CascadeParams:
    stages: list[StageParams]
    reuse: list[ReuseParams]  # reuse[i] feeds stage i + 1


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses/lists of tensors in a fixed order, yielding dotted names."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif obj is None:
        return
    else:
        raise TypeError(f"unexpected {type(obj).__name__} at {prefix!r}")


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def _rng(seed: int, stage: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, stream])


def init_cascade(config: CascadeConfig, seed: int) -> CascadeParams:
    """Seeded initialisation.

    Each stage draws its backbone from its own stream and everything that
    exists only because of reuse from separate streams, so toggling reuse
    leaves the backbone weights unchanged for a given seed.
    """
    enc = config.encoder
    stages = []
    reuse = []
    for i, grid in enumerate(config.grids):
        rng = _rng(seed, i, 0)
        ctx_rng = _rng(seed, i, 1)
        scfg = config.stage_encoder(i)
        embed = init_embed(rng, grid, config.channels, enc.width)
        layers = [
            init_layer(rng, enc.width, enc.hidden, scfg.context_width, ctx_rng)
            for _ in range(enc.layers)
        ]
        head = init_head(rng, enc.width, config.classes)
        stages.append(StageParams(embed, layers, head))
        if i > 0:
            rp = ReuseParams()
            if config.feature_reuse:
                rp.feature = init_feature_reuse(
                    _rng(seed, i, 2), enc.layers, enc.width, config.context_hidden, enc.context_width
                )
            if config.relationship_reuse:
                rp.relation = init_relation_reuse(_rng(seed, i, 3), enc.heads, enc.layers)
            reuse.append(rp)
    return CascadeParams(stages, reuse)


def run_stage(
    images,
    params: CascadeParams,
    config: CascadeConfig,
    i: int,
    upstream: EncoderOutput | None = None,
) -> EncoderOutput:
    """Forward stage ``i``; ``upstream`` is stage ``i - 1``'s output when reuse is on."""
    stage = params.stages[i]
    tokens = tokenize(images, config.grids[i], stage.embed)
    bundle = None
    if config.reuse_active(i):
        if upstream is None:
            raise ValueError(f"stage {i} reuses stage {i - 1} but got no upstream output")
        bundle = make_bundle(
            upstream, config.grids[i - 1], config.grids[i], params.reuse[i - 1], config.encoder.heads
        )
    return encoder_forward(tokens, stage.layers, stage.head, config.stage_encoder(i), bundle)


def forward(images, params: CascadeParams, config: CascadeConfig, upto: int | None = None) -> list[EncoderOutput]:
    outs: list[EncoderOutput] = []
    for i in range(config.num_stages if upto is None else upto):
        outs.append(run_stage(images, params, config, i, outs[-1] if outs else None))
    return outs


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def multi_exit_loss(outputs: Sequence[EncoderOutput], labels) -> Tensor:
    """Sum over exits of the batch-mean cross-entropy."""
    loss = T.cross_entropy(outputs[0].class_logits, labels)
    for out in outputs[1:]:
        loss = loss + T.cross_entropy(out.class_logits, labels)
    return loss


def train_step(images, labels, params: CascadeParams, config: CascadeConfig, optimizer: Adam) -> float:
    """Forward all exits, backprop the summed loss, take one Adam step."""
    try:
        outputs = forward(images, params, config)
        loss = multi_exit_loss(outputs, labels)
        T.backward(loss)
    except NonFiniteError as exc:
        raise NumericError(f"non-finite value during training step {optimizer.state.step + 1}: {exc}") from exc
    value = loss.item()
    optimizer.step()
    return value


# ------------------------------------------------------------------ inference


@dataclass
class ExitPrediction:
    probs: np.ndarray
    confidence: float
    cumulative_flops: float


@dataclass
class AllExits:
    """Softmax output of every exit for every sample, plus per-exit cumulative cost."""

    probs: np.ndarray  # [n, K, C]
    cumulative_flops: np.ndarray  # [K]

    def predictions(self, sample: int) -> list[ExitPrediction]:
        return [
            ExitPrediction(p, float(p.max()), float(f))
            for p, f in zip(self.probs[sample], self.cumulative_flops)
        ]

    def to_trace(self, labels):
        from .budget import ExitTrace

        n, k, _ = self.probs.shape
        return ExitTrace(
            labels=np.asarray(labels, dtype=np.int64),
            probs=self.probs.copy(),
            flops=np.broadcast_to(self.cumulative_flops, (n, k)).copy(),
        )


@dataclass
class AdaptiveResult:
    labels: np.ndarray  # predicted class per sample
    exit_index: np.ndarray  # 0-based exit each sample left from
    cumulative_flops: np.ndarray
    probs: np.ndarray  # [n, C] softmax at the chosen exit


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def infer_all_exits(images, params: CascadeParams, config: CascadeConfig, batch_size: int = 500) -> AllExits:
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    probs = np.empty((n, config.num_stages, config.classes))
    with T.no_grad():
        for sl in _batches(n, batch_size):
            for i, out in enumerate(forward(images[sl], params, config)):
                probs[sl, i] = _softmax_np(out.class_logits.data)
    return AllExits(probs, np.asarray(cumulative_flops(config), dtype=np.float64))


def check_thresholds(thresholds, num_stages: int) -> np.ndarray:
    """Validate thresholds for the first K - 1 exits.

    Values above 1 are allowed and simply make that exit unreachable.
    """
    eta = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if eta.size != num_stages - 1:
        raise ValueError(f"need {num_stages - 1} thresholds, got {eta.size}")
    if np.isnan(eta).any() or (eta < 0).any():
        raise ValueError(f"thresholds must be >= 0, got {eta.tolist()}")
    return eta


def _select(out: EncoderOutput, idx: np.ndarray) -> EncoderOutput:
    from .embed import TokenSequence

    return EncoderOutput(
        final_tokens=TokenSequence(Tensor(out.final_tokens.tokens.data[idx]), out.final_tokens.grid),
        per_layer_logits=[Tensor(a.data[idx]) for a in out.per_layer_logits],
        class_logits=Tensor(out.class_logits.data[idx]),
    )


def infer_adaptive(
    images, params: CascadeParams, config: CascadeConfig, thresholds, batch_size: int = 500
) -> AdaptiveResult:
    """Early-exit inference: each sample stops at the first confident exit.

    Stage ``i + 1`` only runs on the samples that did not exit at stage ``i``.
    """
    k = config.num_stages
    eta = np.append(check_thresholds(thresholds, k), 0.0)
    cum = cumulative_flops(config)
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    labels = np.empty(n, dtype=np.int64)
    exit_index = np.empty(n, dtype=np.int64)
    flops = np.empty(n)
    chosen = np.empty((n, config.classes))
    with T.no_grad():
        for sl in _batches(n, batch_size):
            active = np.arange(sl.start, sl.stop)
            upstream = None
            for i in range(k):
                out = run_stage(images[active], params, config, i, upstream)
                p = _softmax_np(out.class_logits.data)
                done = p.max(axis=1) >= eta[i] if i < k - 1 else np.ones(len(active), bool)
                rows = active[done]
                labels[rows] = p[done].argmax(axis=1)
                exit_index[rows] = i
                flops[rows] = cum[i]
                chosen[rows] = p[done]
                if done.all():
                    break
                active = active[~done]
                upstream = _select(out, np.flatnonzero(~done)) if config.reuse_active(i + 1) else None
    return AdaptiveResult(labels, exit_index, flops, chosen)


# ---------------------------------------------------------------------- FLOPs


def encoder_layer_flops(tokens: int, width: int, mlp_ratio: int = 4) -> int:
    """One MSA + MLP layer: projections and MLP ``(8 + 4 r) N D^2``, plus ``QK^T``/``AV`` ``4 N^2 D``."""
    n, d = tokens, width
    return (8 * d * d + 4 * d * (mlp_ratio * d)) * n + 4 * n * n * d


def flops_estimate(config: CascadeConfig, stage_index: int) -> int:
    """Analytic per-image FLOPs of one stage (multiply-add = 2 FLOPs).

    Counts projections and matmuls only: patch projection, encoder layers,
    context widening of the first MLP layer, the head, and the reuse
    transforms feeding this stage. LN, softmax, GELU and resampling are free.
    """
    if not 0 <= stage_index < config.num_stages:
        raise IndexError(f"stage {stage_index} out of range for {config.num_stages} stages")
    enc = config.encoder
    grid = config.grids[stage_index]
    n, d, layers = grid.num_tokens, enc.width, enc.layers
    hidden = enc.hidden
    total = layers * encoder_layer_flops(n, d, enc.mlp_ratio)
    total += 2 * n * (grid.patch_px**2 * config.channels) * d
    total += 2 * d * config.classes
    if stage_index > 0:
        n_up = config.grids[stage_index - 1].num_tokens
        if config.feature_reuse:
            cw, hf = enc.context_width, config.context_hidden
            total += 2 * layers * n_up * d * hf + 2 * layers * n_up * hf * cw
            total += 2 * layers * n * cw * hidden
        if config.relationship_reuse:
            c = enc.heads * layers
            total += 2 * n_up * n_up * c * (3 * c) * 2
    return int(total)


def cumulative_flops(config: CascadeConfig) -> list[int]:
    out, acc = [], 0
    for i in range(config.num_stages):
        acc += flops_estimate(config, i)
        out.append(acc)
    return out


def measure_stage_flops(params: CascadeParams, config: CascadeConfig, images=None) -> list[int]:
    """Per-image matmul FLOPs of each stage, counted while actually running it."""
    if images is None:
        h, w = config.image_hw
        images = np.random.default_rng(0).random((1, config.channels, h, w))
    images = np.asarray(images, dtype=np.float64)
    counts = []
    upstream = None
    with T.no_grad():
        for i in range(config.num_stages):
            with T.count_matmul_flops() as counter:
                upstream = run_stage(images, params, config, i, upstream)
            counts.append(counter.total // images.shape[0])
    return counts
