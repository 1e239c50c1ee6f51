"""Mask-gated object tokens.

Each object's feature is the scene feature map zeroed outside its mask. The
gated map is flattened row-major, cut into ``L`` contiguous chunks and each
chunk is average-pooled into one token. No projection is applied, so the
token width equals the feature channel count. A learnable class token is
prepended and the object's class embedding is added to all ``L + 1`` tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nx
from .numeric import DimensionError, Tensor
from .scene import Scene


class LabelError(ValueError):
    pass


def mask_gate(f: np.ndarray, m: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m)
    if f.ndim != 3 or m.shape != f.shape[:2]:
        raise DimensionError(f"mask {m.shape} does not match feature map {f.shape}")
    return f * m.astype(np.float64)[:, :, None]


def patchify(fi: np.ndarray, L: int) -> np.ndarray:
    H, W, C = fi.shape
    if (H * W) % L:
        raise DimensionError(f"H*W={H * W} not divisible into {L} patches")
    return fi.reshape(L, (H * W) // L, C).mean(axis=1)


def object_patches(scene: Scene, L: int) -> np.ndarray:
    """N x L x C patch tokens for all objects of a scene (no learnable parts)."""
    f = scene.features
    H, W, C = f.shape
    if (H * W) % L:
        raise DimensionError(f"H*W={H * W} not divisible into {L} patches")
    gated = scene.masks[:, :, :, None] * f[None]
    return gated.reshape(scene.n, L, (H * W) // L, C).mean(axis=2)


@dataclass
class TokenizerParams:
    class_token: Tensor  # D
    class_embedding: Tensor  # num_classes x D
    L: int

    @property
    def D(self) -> int:
        return self.class_token.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_embedding.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, num_classes: int, D: int, L: int, scale: float = 0.02):
        return cls(
            nx.parameter(scale * rng.standard_normal(D), "tok.class_token"),
            nx.parameter(scale * rng.standard_normal((num_classes, D)), "tok.class_embedding"),
            L,
        )

    def named(self) -> dict[str, Tensor]:
        return {"tok.class_token": self.class_token, "tok.class_embedding": self.class_embedding}


def tokenize_patches(patches: np.ndarray, labels: np.ndarray, params: TokenizerParams) -> Tensor:
    N, L, D = patches.shape
    if D != params.D:
        raise DimensionError(f"feature channels {D} differ from token width {params.D}")
    labels = np.asarray(labels, dtype=np.int64)
    if ((labels < 0) | (labels >= params.num_classes)).any():
        raise LabelError(f"object label outside [0, {params.num_classes})")
    cls_tok = nx.add(nx.reshape(params.class_token, (1, 1, D)), np.zeros((N, 1, D)))
    tokens = nx.concat([cls_tok, Tensor(patches)], axis=1)
    emb = nx.reshape(nx.take_rows(params.class_embedding, labels), (N, 1, D))
    return nx.add(tokens, emb)


def tokenize_scene(scene: Scene, params: TokenizerParams) -> Tensor:
    """TokenGrid of shape N x (L+1) x D; position 0 is the class-token slot."""
    return tokenize_patches(object_patches(scene, params.L), scene.labels, params)
