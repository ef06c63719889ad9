"""Multimodal additive-angular-margin identity loss and the alignment slot.

Both losses take *raw* feature rows and L2-normalize them internally; the
returned gradients are with respect to those raw rows (and the raw class
weight rows), chain rule through the normalization included.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import (
    DegenerateAngle,
    LabelOutOfRange,
    ShapeMismatch,
    SingleIdentityBatch,
    ZeroVector,
)

SIN_GUARD = 1e-7
DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class MarginConfig:
    m: float = 0.35
    s: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.m < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.m}")
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")


@dataclass
class LossOutput:
    loss: float
    logits: np.ndarray
    grad_features: np.ndarray | None = None
    grad_weights: np.ndarray | None = None
    degenerate: int = 0

    def dump(self) -> dict:
        return {
            "loss": float(self.loss),
            "grad_feature_norm": _norm_or_none(self.grad_features),
            "grad_weight_norm": _norm_or_none(self.grad_weights),
        }


@dataclass
class MultimodalLossOutput:
    loss: float
    image: LossOutput
    text: LossOutput
    grad_image_features: np.ndarray | None = None
    grad_text_features: np.ndarray | None = None
    grad_weights: np.ndarray | None = None

    @property
    def degenerate(self) -> int:
        return self.image.degenerate + self.text.degenerate


def _norm_or_none(a):
    return None if a is None else float(np.linalg.norm(a))


def init_class_weights(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.standard_normal((num_classes, dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def target_margin_cosine(cos_theta, m: float):
    """Margin-adjusted target cosine.

    ``cos(theta + m)`` while ``theta <= pi - m``; past that point the value
    continues as ``cos(theta) - m * sin(pi - m)``. The two pieces do not meet
    at the switch point.
    """
    c = np.asarray(cos_theta, dtype=np.float64)
    sin_t = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    main = c * math.cos(m) - sin_t * math.sin(m)
    tail = c - m * math.sin(math.pi - m)
    out = np.where(c >= math.cos(math.pi - m), main, tail)
    return float(out) if out.ndim == 0 else out


def _normalize(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(~(norms > 1e-12)):
        raise ZeroVector(f"{what} contains a zero row")
    return x / norms[:, None], norms


def _unnormalize_grad(g: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|)/dx applied to g: (g - (g.u) u) / |x|
    radial = np.einsum("ij,ij->i", g, unit)
    return (g - radial[:, None] * unit) / norms[:, None]


def _check(features: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    if features.ndim != 2 or weights.ndim != 2:
        raise ShapeMismatch("features and weights must be 2-d")
    if features.shape[0] < 1:
        raise ShapeMismatch("empty batch")
    if features.shape[1] != weights.shape[1]:
        raise ShapeMismatch(f"feature dim {features.shape[1]} != weight dim {weights.shape[1]}")
    if labels.shape != (features.shape[0],):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch {features.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= weights.shape[0]):
        raise LabelOutOfRange(f"labels must lie in [0, {weights.shape[0]})")


def _ma_id(features, labels, weights, cfg: MarginConfig, need_grad: bool) -> LossOutput:
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check(f, y, w)
    u, fn = _normalize(f, "features")
    wh, wn = _normalize(w, "weights")
    B = f.shape[0]
    rows = np.arange(B)

    cos = np.clip(u @ wh.T, -1.0, 1.0)
    ct = cos[rows, y]
    z = cfg.s * cos
    z[rows, y] = cfg.s * target_margin_cosine(ct, cfg.m)

    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sumexp = ez.sum(axis=1)
    lse = zmax[:, 0] + np.log(sumexp)
    loss = float(np.mean(lse - z[rows, y]))
    out = LossOutput(loss=loss, logits=z)
    if not need_grad:
        return out

    dz = ez / sumexp[:, None]
    dz[rows, y] -= 1.0
    dz /= B
    dcos = cfg.s * dz

    if cfg.m == 0.0:
        dgamma = np.ones(B)
    else:
        sin_t = np.sqrt(np.clip(1.0 - ct * ct, 0.0, None))
        on_main = ct >= math.cos(math.pi - cfg.m)
        degenerate = on_main & (sin_t < SIN_GUARD)
        safe = np.where(degenerate, 1.0, sin_t)
        # d cos(theta+m) / d cos(theta) = sin(theta+m) / sin(theta)
        main = (sin_t * math.cos(cfg.m) + ct * math.sin(cfg.m)) / safe
        dgamma = np.where(on_main, np.where(degenerate, 0.0, main), 1.0)
        out.degenerate = int(degenerate.sum())
        if out.degenerate:
            warnings.warn(
                f"{out.degenerate} target angle(s) within {SIN_GUARD:g} of 0; margin gradient zeroed",
                DegenerateAngle,
                stacklevel=3,
            )
    dcos[rows, y] *= dgamma

    du = dcos @ wh
    dwh = dcos.T @ u
    out.grad_features = _unnormalize_grad(du, u, fn)
    out.grad_weights = _unnormalize_grad(dwh, wh, wn)
    return out


def ma_id_forward(features, labels, weights, cfg: MarginConfig) -> LossOutput:
    """Batch-mean margin cross-entropy; fills ``loss`` and ``logits`` only."""
    return _ma_id(features, labels, weights, cfg, need_grad=False)


def ma_id_backward(features, labels, weights, cfg: MarginConfig) -> tuple[np.ndarray, np.ndarray]:
    out = _ma_id(features, labels, weights, cfg, need_grad=True)
    return out.grad_features, out.grad_weights


def ma_id(features, labels, weights, cfg: MarginConfig) -> LossOutput:
    """Forward and backward in one pass."""
    return _ma_id(features, labels, weights, cfg, need_grad=True)


def multimodal_ma_id(f_v, f_t, labels, weights, cfg: MarginConfig, need_grad: bool = True) -> MultimodalLossOutput:
    """Average of the image and text identity losses over one shared classifier."""
    img = _ma_id(f_v, labels, weights, cfg, need_grad)
    txt = _ma_id(f_t, labels, weights, cfg, need_grad)
    out = MultimodalLossOutput(loss=(img.loss + txt.loss) / 2, image=img, text=txt)
    if need_grad:
        out.grad_image_features = img.grad_features / 2
        out.grad_text_features = txt.grad_features / 2
        out.grad_weights = (img.grad_weights + txt.grad_weights) / 2
    return out


class AlignmentLoss(Protocol):
    """Cross-modal ranking objective: returns (loss, grad_image, grad_text)."""

    def __call__(self, f_v, f_t, labels) -> tuple[float, np.ndarray, np.ndarray]: ...


def _log_softmax(x: np.ndarray) -> np.ndarray:
    xm = x - x.max(axis=1, keepdims=True)
    return xm - np.log(np.exp(xm).sum(axis=1, keepdims=True))


def alignment_loss(f_v, f_t, labels, temperature: float = DEFAULT_TEMPERATURE):
    """Symmetric in-batch cross-modal cross-entropy with identity-aware targets.

    Row ``i`` of the text-to-image similarity matrix is scored against a
    target distribution spread uniformly over the images sharing caption
    ``i``'s identity; the image-to-text direction is the transpose. Returns
    ``(loss, (grad_v, grad_t))`` with gradients on the raw rows.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    fv = np.asarray(f_v, dtype=np.float64)
    ft = np.asarray(f_t, dtype=np.float64)
    y = np.asarray(labels)
    if fv.shape != ft.shape or fv.ndim != 2 or y.shape != (fv.shape[0],):
        raise ShapeMismatch("f_v, f_t and labels disagree in shape")
    if np.unique(y).size < 2:
        warnings.warn("alignment batch has a single identity", SingleIdentityBatch, stacklevel=2)
    u, un = _normalize(fv, "image features")
    v, vn = _normalize(ft, "text features")
    B = fv.shape[0]

    pos = (y[:, None] == y[None, :]).astype(np.float64)
    target = pos / pos.sum(axis=1, keepdims=True)
    logits = (v @ u.T) / temperature  # text rows, image columns
    ls_t2i = _log_softmax(logits)
    ls_i2t = _log_softmax(logits.T)
    loss_t2i = -float(np.sum(target * ls_t2i)) / B
    loss_i2t = -float(np.sum(target * ls_i2t)) / B
    loss = (loss_t2i + loss_i2t) / 2

    d_t2i = (np.exp(ls_t2i) - target) / (2 * B)
    d_i2t = (np.exp(ls_i2t) - target) / (2 * B)
    dlogits = (d_t2i + d_i2t.T) / temperature
    dv = dlogits @ u
    du = dlogits.T @ v
    return loss, (_unnormalize_grad(du, u, un), _unnormalize_grad(dv, v, vn))


@dataclass(frozen=True)
class SymmetricContrastive:
    """Default alignment objective, usable wherever an AlignmentLoss is expected."""

    temperature: float = DEFAULT_TEMPERATURE

    def __call__(self, f_v, f_t, labels):
        loss, (gv, gt) = alignment_loss(f_v, f_t, labels, self.temperature)
        return loss, gv, gt
