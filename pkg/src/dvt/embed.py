"""Image -> token sequence: patch split, projection, class token, positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import param, trunc_normal
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class TokenGridSpec:
    grid_h: int
    grid_w: int
    patch_px: int

    def __post_init__(self):
        for name in ("grid_h", "grid_w", "patch_px"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w + 1

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.grid_h * self.patch_px, self.grid_w * self.patch_px

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid_h, self.grid_w


@dataclass
class TokenSequence:
    """Tokens [B, N, D]; row 0 is the classification token."""

    tokens: Tensor
    grid: TokenGridSpec

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.grid.num_tokens:
            raise ShapeError(
                f"tokens {self.tokens.shape} do not match grid with {self.grid.num_tokens} tokens"
            )


@dataclass
class EmbedParams:
    projection: Tensor  # [patch_px**2 * channels, D]
    bias: Tensor  # [D]
    class_token: Tensor  # [1, D]
    pos_embedding: Tensor  # [N, D]


def init_embed(rng: np.random.Generator, grid: TokenGridSpec, channels: int, width: int) -> EmbedParams:
    patch_dim = grid.patch_px**2 * channels
    return EmbedParams(
        projection=param(trunc_normal(rng, (patch_dim, width))),
        bias=param(np.zeros(width)),
        class_token=param(trunc_normal(rng, (1, width))),
        pos_embedding=param(trunc_normal(rng, (grid.num_tokens, width))),
    )


def extract_patches(images: np.ndarray, grid: TokenGridSpec) -> np.ndarray:
    """[B, C, H, W] -> [B, grid_h*grid_w, C*p*p], patches row-major, pixels channel-major."""
    b, c, h, w = images.shape
    if (h, w) != grid.image_hw:
        raise ShapeError(
            f"{h}x{w} images do not split into a {grid.grid_h}x{grid.grid_w} grid "
            f"of {grid.patch_px}px patches"
        )
    p = grid.patch_px
    x = images.reshape(b, c, grid.grid_h, p, grid.grid_w, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, grid.num_patches, c * p * p)


def tokenize(images, grid: TokenGridSpec, params: EmbedParams) -> TokenSequence:
    images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W] images, got shape {images.shape}")
    patch_dim = grid.patch_px**2 * images.shape[1]
    width = params.projection.shape[1]
    if params.projection.shape[0] != patch_dim:
        raise ShapeError(
            f"projection expects {params.projection.shape[0]}-d patches, grid yields {patch_dim}"
        )
    if params.pos_embedding.shape != (grid.num_tokens, width):
        raise ShapeError(
            f"pos_embedding {params.pos_embedding.shape} != ({grid.num_tokens}, {width})"
        )
    b = images.shape[0]
    patches = Tensor(extract_patches(images, grid))
    image_tokens = T.linear(patches, params.projection, params.bias)
    cls = T.broadcast_to(T.reshape(params.class_token, (1, 1, width)), (b, 1, width))
    tokens = T.concat([cls, image_tokens], axis=1) + params.pos_embedding
    return TokenSequence(tokens, grid)
