"""Channel and spatial attention over convolutional feature maps.

Channel weights come from a squeeze-style two-layer FC head over globally
pooled features (softmax output, so they live on the channel simplex).  The
spatial map is the channel-summed, sum-normalized weighted feature stack; an
exponential-normalization variant is available behind ``mode="exp"``.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "AttentionParams",
    "SPATIAL_MODES",
    "channel_weights",
    "apply_channel",
    "spatial_map",
    "apply_spatial",
    "attention_forward",
]

SPATIAL_MODES = ("eq3", "exp")


@dataclass
class AttentionParams:
    """Weights of the channel-recalibration FC pair (no biases)."""

    fc1: Tensor  # (C, C // r)
    fc2: Tensor  # (C // r, C)
    reduction: int

    def __post_init__(self):
        c, hidden = self.fc1.shape
        if self.reduction <= 0 or c % self.reduction:
            raise ValueError(f"reduction {self.reduction} must divide channel count {c}")
        if hidden != c // self.reduction or self.fc2.shape != (hidden, c):
            raise ValueError(
                f"FC shapes {tuple(self.fc1.shape)}/{tuple(self.fc2.shape)} inconsistent "
                f"with C={c}, r={self.reduction}"
            )

    @property
    def channels(self) -> int:
        return self.fc1.shape[0]


def channel_weights(features: Tensor, params: AttentionParams) -> Tensor:
    """Softmax channel weights from pooled features: softmax(fc2(relu(fc1(gap(A)))))."""
    c = features.shape[0]
    if c != params.channels:
        raise ValueError(f"feature maps have {c} channels, params expect {params.channels}")
    pooled = T.reshape(T.global_avg_pool(features), (1, c))
    hidden = T.relu(T.matmul(pooled, params.fc1))
    scores = T.matmul(hidden, params.fc2)
    return T.reshape(T.softmax(scores, axis=1), (c,))


def apply_channel(features: Tensor, weights: Tensor) -> Tensor:
    """Rescale each feature map by its channel weight."""
    c = features.shape[0]
    if weights.shape != (c,):
        raise ValueError(f"channel weights shape {tuple(weights.shape)} does not match {c} channels")
    return T.hadamard(features, T.reshape(weights, (c, 1, 1)))


def spatial_map(weighted: Tensor, mode="eq3") -> Tensor:
    """Collapse (C, W, H) maps to a spatial distribution over (W, H).

    ``eq3`` divides the channel-summed map by its total mass; ``exp``
    exponentiates the channel-summed map before normalizing (2-D softmax).
    """
    if mode not in SPATIAL_MODES:
        raise ValueError(f"unknown spatial mode {mode!r}, expected one of {SPATIAL_MODES}")
    if weighted.data.ndim != 3:
        raise ValueError(f"spatial_map: expects (C, W, H), got shape {tuple(weighted.shape)}")
    summed = T.reduce_sum(weighted, axes=(0,))
    if mode == "exp":
        flat = T.reshape(summed, (summed.data.size,))
        return T.reshape(T.softmax(flat, axis=0), summed.shape)
    if float(summed.data.sum()) == 0.0:
        raise ValueError("spatial_map: degenerate input, channel-summed map has zero total")
    return T.div(summed, T.reduce_sum(summed))


def apply_spatial(features: Tensor, attention: Tensor) -> Tensor:
    """Reweight every channel by the spatial map (broadcast Hadamard)."""
    if features.shape[1:] != attention.shape:
        raise ValueError(
            f"spatial map shape {tuple(attention.shape)} does not match "
            f"feature maps {tuple(features.shape)}"
        )
    return T.hadamard(features, attention)


def attention_forward(features: Tensor, params: AttentionParams, mode="eq3"):
    """Full channel-then-spatial pass; returns (S, B, T, D)."""
    weights = channel_weights(features, params)
    weighted = apply_channel(features, weights)
    spatial = spatial_map(weighted, mode=mode)
    attended = apply_spatial(features, spatial)
    return weights, weighted, spatial, attended
