"""Feature extractors feeding the planner.

Two interchangeable options: :class:`OraclePerception`, a frozen random
projection of ground-truth labels, and :class:`TinyEncoder`, a trainable
two-layer tanh network used by the learning loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bevmap import NUM_CLASSES, pool_grid
from .errors import DimensionMismatch

DEPTH_SCALE = 10.0


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour subsample at block centres."""
    return labels[..., factor // 2 :: factor, factor // 2 :: factor]


def downsample_rgb(rgb: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean pool an ``(..., H, W, 3)`` uint8 image into ``[0, 1]`` floats."""
    *lead, h, w, c = rgb.shape
    if h % factor or w % factor:
        raise DimensionMismatch(f"image {rgb.shape} not divisible by {factor}")
    x = rgb.reshape(*lead, h // factor, factor, w // factor, factor, c).astype(np.float64)
    return x.mean(axis=(-4, -2)) / 255.0


def one_hot(labels: np.ndarray, classes: int = NUM_CLASSES) -> np.ndarray:
    return (labels[..., None] == np.arange(classes)).astype(np.float64)


@dataclass
class OraclePerception:
    """Frozen seeded projection of ground-truth segmentation, depth and BEV."""

    dim: int = 16
    seed: int = 0
    image_shape: tuple[int, int] = (32, 64)
    image_factor: int = 4
    bev_factor: int = 16
    bev_shape: tuple[int, int] = (128, 256)

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.seed)
        h, w = self.image_shape[0] // self.image_factor, self.image_shape[1] // self.image_factor
        n_img = h * w * (NUM_CLASSES + 1)
        n_bev = (self.bev_shape[0] // self.bev_factor) * (self.bev_shape[1] // self.bev_factor) * NUM_CLASSES
        self.P_rgb = rng.normal(0.0, 1.0 / np.sqrt(n_img), (self.dim, n_img))
        self.P_bev = rng.normal(0.0, 4.0 / np.sqrt(n_bev), (self.dim, n_bev))

    def rgb_features(self, labels: np.ndarray, depth: np.ndarray) -> np.ndarray:
        if labels.shape != tuple(self.image_shape) or depth.shape != tuple(self.image_shape):
            raise DimensionMismatch(f"expected images of shape {self.image_shape}")
        seg = one_hot(downsample_labels(labels, self.image_factor))
        d = downsample_labels(depth, self.image_factor)[..., None] / DEPTH_SCALE
        return np.tanh(self.P_rgb @ np.concatenate([seg, d], axis=-1).ravel())

    def bev_features(self, bev: np.ndarray) -> np.ndarray:
        return np.tanh(self.P_bev @ pool_grid(bev, self.bev_factor).ravel())


@dataclass
class TinyEncoder:
    """``f = tanh(W2 tanh(W1 x + b1) + b2)``; the hidden layer is exposed for auxiliary heads."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def random(cls, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator) -> "TinyEncoder":
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(in_dim), (hidden, in_dim)),
            np.zeros(hidden),
            rng.normal(0.0, 1.0 / np.sqrt(hidden), (out_dim, hidden)),
            np.zeros(out_dim),
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(features, hidden activations)`` for ``x`` of shape ``(..., in_dim)``."""
        if x.shape[-1] != self.W1.shape[1]:
            raise DimensionMismatch(f"encoder input {x.shape[-1]} != {self.W1.shape[1]}")
        a1 = np.tanh(x @ self.W1.T + self.b1)
        return np.tanh(a1 @ self.W2.T + self.b2), a1
