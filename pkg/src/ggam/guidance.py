"""Class-activation guidance: gradient-derived channel weights and the losses.

The guidance pass backpropagates the predicted-class score through a retained
forward graph, averages the feature-map gradients spatially into per-channel
importances, squashes them with a sigmoid, and renormalizes onto the simplex.
The resulting target supervises the channel attention weights through a
symmetric KL penalty that is differentiable in the attention weights only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "EPS",
    "GuidanceTarget",
    "LossBreakdown",
    "class_score",
    "gradcam_weights",
    "gradcam_weights_batch",
    "kl",
    "ggam_loss",
    "cross_entropy",
    "total_loss",
    "heatmap",
    "bilinear_upsample",
]

EPS = 1e-12  # inside every log; keeps near-zero simplex entries finite


@dataclass
class GuidanceTarget:
    """Per-channel importance of the predicted class, in three forms."""

    beta: np.ndarray  # raw spatially-averaged gradients, length C
    beta_squashed: np.ndarray  # sigmoid(beta), in (0, 1)
    beta_normalized: np.ndarray  # squashed weights renormalized onto the simplex
    class_index: int

    @classmethod
    def from_beta(cls, beta, class_index) -> "GuidanceTarget":
        beta = np.asarray(beta, dtype=np.float64)
        squashed = 1.0 / (1.0 + np.exp(-beta))
        return cls(
            beta=beta,
            beta_squashed=squashed,
            beta_normalized=squashed / squashed.sum(),
            class_index=int(class_index),
        )


@dataclass
class LossBreakdown:
    ce: float
    ggam: float
    lam: float
    total: float


def class_score(trace, k) -> Tensor:
    """Graph-attached pre-softmax logit of class k."""
    return T.select(trace.logits, k)


def gradcam_weights(trace) -> GuidanceTarget:
    """Channel importances of the predicted class via one backward pass.

    Backpropagates the predicted-class logit to the feature maps A, spatially
    averages the gradient per channel, and clears every gradient it touched so
    nothing leaks into the subsequent parameter-update backward pass.
    """
    (target,) = gradcam_weights_batch([trace])
    return target


def gradcam_weights_batch(traces) -> list:
    """Guidance pass for a batch: one backward from the summed class scores."""
    for trace in traces:
        if not trace.graph_retained:
            raise ValueError("gradcam_weights: trace does not retain the computation graph")
    scores = [class_score(tr, tr.predicted) for tr in traces]
    total = scores[0]
    for s in scores[1:]:
        total = T.add(total, s)
    # the pass only needs d(score)/d(feature maps); stop there instead of
    # sweeping the backbone whose gradients would be discarded anyway
    T.backward(total, stop_at=[tr.feature_maps for tr in traces])
    targets = []
    for trace in traces:
        if trace.feature_maps.grad is None:
            raise ValueError("gradcam_weights: no gradient reached the feature maps")
        beta = trace.feature_maps.grad.mean(axis=(1, 2))
        targets.append(GuidanceTarget.from_beta(beta, trace.predicted))
    T.zero_grad(total)
    return targets


def kl(p, q) -> float:
    """KL divergence sum(p * ln((p + eps) / (q + eps))) between simplex vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"kl: expects equal-length vectors, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0):
            raise ValueError(f"kl: {name} has negative entries")
        if abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"kl: {name} sums to {v.sum():.8f}, not 1")
    return float(np.sum(p * (np.log(p + EPS) - np.log(q + EPS))))


def ggam_loss(s: Tensor, guidance: GuidanceTarget) -> Tensor:
    """Symmetric KL between channel weights S and the guidance distribution.

    The guidance side is a constant: gradients flow into S only.
    """
    beta_hat = np.asarray(guidance.beta_normalized, dtype=np.float64)
    if s.shape != beta_hat.shape:
        raise ValueError(f"ggam_loss: S shape {tuple(s.shape)} vs target shape {beta_hat.shape}")
    log_beta = Tensor(np.log(beta_hat + EPS))
    log_s = T.log(T.add(s, EPS))
    forward_kl = T.reduce_sum(T.hadamard(s, T.sub(log_s, log_beta)))
    reverse_kl = T.reduce_sum(T.hadamard(Tensor(beta_hat), T.sub(log_beta, log_s)))
    return T.hadamard(0.5, T.add(forward_kl, reverse_kl))


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log softmax probability of the label, max-shift stabilized."""
    label = int(label)
    if logits.data.ndim != 1:
        raise ValueError(f"cross_entropy: expects a logit vector, got shape {tuple(logits.shape)}")
    if not 0 <= label < logits.data.shape[0]:
        raise IndexError(f"cross_entropy: label {label} out of range for {logits.data.shape[0]} classes")
    shifted = T.sub(logits, float(logits.data.max()))
    return T.sub(T.log(T.reduce_sum(T.exp(shifted))), T.select(shifted, label))


def total_loss(ce, ggam, lam) -> LossBreakdown:
    """Combine the terms: total = ce + lam * ggam."""
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"total_loss: lambda must be nonnegative, got {lam}")
    ce, ggam = float(ce), float(ggam)
    return LossBreakdown(ce=ce, ggam=ggam, lam=lam, total=ce + lam * ggam)


def bilinear_upsample(values: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a (w, h) grid to (out_w, out_h)."""
    values = np.asarray(values, dtype=np.float64)
    w, h = values.shape
    if out_w < w or out_h < h:
        raise ValueError(f"upsample: output {out_w}x{out_h} smaller than input {w}x{h}")
    sx = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    sy = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    x0 = np.minimum(sx.astype(int), w - 1)
    y0 = np.minimum(sy.astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[None, :]
    return (
        values[np.ix_(x0, y0)] * (1 - fx) * (1 - fy)
        + values[np.ix_(x0, y1)] * (1 - fx) * fy
        + values[np.ix_(x1, y0)] * fx * (1 - fy)
        + values[np.ix_(x1, y1)] * fx * fy
    )


def heatmap(a, guidance: GuidanceTarget, out_w: int, out_h: int) -> np.ndarray:
    """Importance-weighted activation map in [0, 1] at the requested resolution.

    relu of the beta-weighted channel sum, min-max normalized (an all-zero map
    stays zero, a constant nonzero map becomes all ones), bilinearly upsampled.
    """
    data = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"heatmap: expects (C, W, H) feature maps, got shape {data.shape}")
    raw = np.maximum(np.tensordot(guidance.beta, data, axes=([0], [0])), 0.0)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        norm = np.zeros_like(raw) if hi == 0.0 else np.ones_like(raw)
    else:
        norm = (raw - lo) / (hi - lo)
    return bilinear_upsample(norm, out_w, out_h)
