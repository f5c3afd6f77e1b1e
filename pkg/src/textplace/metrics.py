"""Box metrics (IoU, BDE) and the Complete-IoU loss with its analytic gradient.

Boxes are ``(left, top, width, height)`` in normalized canvas units. The
array functions take ``(N, 4)`` arrays; the scalar wrappers accept
:class:`~textplace.layout.BBox` or any 4-sequence.

The CIoU gradient holds the aspect weight ``alpha`` constant. At ties of
the min/max operators (e.g. coincident edges) the symmetric subgradient
(weight 1/2 on each branch) is used, so ``pred == gt`` has zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layout import BBox

ASPECT_SCALE = 4.0 / math.pi**2


def _as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes.as_tuple() if isinstance(boxes, BBox) else boxes, dtype=np.float64)
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 4:
        raise ValueError(f"boxes must have 4 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite bbox")
    return arr


def _step(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d max(a, b) / da with the symmetric convention at ties."""
    return np.where(a > b, 1.0, np.where(a == b, 0.5, 0.0))


def _overlap(lo1, len1, lo2, len2) -> np.ndarray:
    """Signed overlap of two intervals; exact when they share their start."""
    raw = np.minimum(lo1 + len1, lo2 + len2) - np.maximum(lo1, lo2)
    return np.where(lo1 == lo2, np.minimum(len1, len2), raw)


def iou_array(a, b) -> np.ndarray:
    a, b = _as_boxes(a), _as_boxes(b)
    iw = np.maximum(0.0, _overlap(a[:, 0], a[:, 2], b[:, 0], b[:, 2]))
    ih = np.maximum(0.0, _overlap(a[:, 1], a[:, 3], b[:, 1], b[:, 3]))
    area_a, area_b = a[:, 2] * a[:, 3], b[:, 2] * b[:, 3]
    # rounding in the edge arithmetic can push inter past the smaller area
    inter = np.minimum(iw * ih, np.minimum(area_a, area_b))
    union = area_a + area_b - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def bde_array(pred, gt) -> np.ndarray:
    p, g = _as_boxes(pred), _as_boxes(gt)
    return (
        np.abs(p[:, 0] - g[:, 0])
        + np.abs((p[:, 0] - g[:, 0]) + (p[:, 2] - g[:, 2]))
        + np.abs(p[:, 1] - g[:, 1])
        + np.abs((p[:, 1] - g[:, 1]) + (p[:, 3] - g[:, 3]))
    ) / 4.0


def iou(a, b) -> float:
    """Intersection over union; 0 when both boxes are degenerate."""
    return float(iou_array(a, b)[0])


def bde(pred, gt) -> float:
    """Mean absolute displacement of the left, right, top and bottom edges."""
    return float(bde_array(pred, gt)[0])


@dataclass(frozen=True)
class CIoUBreakdown:
    iou: float
    center_penalty: float
    aspect_term_v: float
    alpha: float
    ciou: float
    loss: float


def ciou_terms(pred, gt, alpha=None) -> dict[str, np.ndarray]:
    """Vectorized CIoU terms. ``alpha`` overrides the aspect weight when given."""
    p, g = _as_boxes(pred), _as_boxes(gt)
    if np.any(g[:, 2] <= 0) or np.any(g[:, 3] <= 0):
        raise ValueError("degenerate ground truth")
    if np.any(p[:, 2] < 0) or np.any(p[:, 3] < 0):
        raise ValueError("negative prediction size")
    return _ciou_core(p, g, alpha, with_grad=False)


def _ciou_core(p: np.ndarray, g: np.ndarray, alpha, with_grad: bool) -> dict[str, np.ndarray]:
    l, t, w, h = p.T
    L, T, W, H = g.T
    x2, y2, X2, Y2 = l + w, t + h, L + W, T + H

    iw_raw = _overlap(l, w, L, W)
    ih_raw = _overlap(t, h, T, H)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = np.minimum(iw * ih, np.minimum(w * h, W * H))
    union = w * h + W * H - inter
    iou_ = inter / union

    dcx, dcy = (l + w / 2) - (L + W / 2), (t + h / 2) - (T + H / 2)
    rho2 = dcx**2 + dcy**2
    cw = np.maximum(x2, X2) - np.minimum(l, L)
    ch = np.maximum(y2, Y2) - np.minimum(t, T)
    c2 = cw**2 + ch**2
    penalty = rho2 / c2

    dangle = np.arctan2(W, H) - np.arctan2(w, h)
    v = ASPECT_SCALE * dangle**2
    if alpha is None:
        denom = (1.0 - iou_) + v
        alpha_ = np.where(denom > 0, v / np.where(denom > 0, denom, 1.0), 0.0)
    else:
        alpha_ = np.broadcast_to(np.asarray(alpha, dtype=np.float64), v.shape)
    ciou_ = iou_ - penalty - alpha_ * v
    out = {"iou": iou_, "center_penalty": penalty, "aspect_term_v": v,
           "alpha": alpha_, "ciou": ciou_, "loss": 1.0 - ciou_}
    if not with_grad:
        return out

    # intersection extents w.r.t. (l, w) and (t, h)
    gx = _step(iw_raw, 0.0)
    gy = _step(ih_raw, 0.0)
    sx_hi, sx_lo = _step(X2, x2), _step(l, L)  # d min(x2,X2)/dx2, d max(l,L)/dl
    sy_hi, sy_lo = _step(Y2, y2), _step(t, T)
    d_iw_dl, d_iw_dw = gx * (sx_hi - sx_lo), gx * sx_hi
    d_ih_dt, d_ih_dh = gy * (sy_hi - sy_lo), gy * sy_hi

    d_inter = np.stack([d_iw_dl * ih, d_ih_dt * iw, d_iw_dw * ih, d_ih_dh * iw], axis=1)
    d_area = np.stack([np.zeros_like(w), np.zeros_like(h), h, w], axis=1)
    d_union = d_area - d_inter
    d_iou = (d_inter * union[:, None] - inter[:, None] * d_union) / union[:, None] ** 2

    d_rho2 = np.stack([2 * dcx, 2 * dcy, dcx, dcy], axis=1)
    ex_hi, ex_lo = _step(x2, X2), _step(L, l)  # d max(x2,X2)/dx2, d min(l,L)/dl
    ey_hi, ey_lo = _step(y2, Y2), _step(T, t)
    d_cw = np.stack([ex_hi - ex_lo, np.zeros_like(w), ex_hi, np.zeros_like(w)], axis=1)
    d_ch = np.stack([np.zeros_like(h), ey_hi - ey_lo, np.zeros_like(h), ey_hi], axis=1)
    d_c2 = 2 * cw[:, None] * d_cw + 2 * ch[:, None] * d_ch
    d_pen = (d_rho2 * c2[:, None] - rho2[:, None] * d_c2) / c2[:, None] ** 2

    r2 = w**2 + h**2
    coef = 2 * ASPECT_SCALE * dangle / r2
    d_v = np.stack([np.zeros_like(w), np.zeros_like(h), -coef * h, coef * w], axis=1)

    out["grad"] = -d_iou + d_pen + alpha_[:, None] * d_v
    return out


def ciou_loss_and_grad(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss ``1 - CIoU`` and its gradient w.r.t. the prediction, shape (N, 4)."""
    p, g = _as_boxes(pred), _as_boxes(gt)
    if np.any(g[:, 2] <= 0) or np.any(g[:, 3] <= 0):
        raise ValueError("degenerate ground truth")
    if np.any(p[:, 2] <= 0) or np.any(p[:, 3] <= 0):
        raise ValueError("degenerate prediction")
    out = _ciou_core(p, g, None, with_grad=True)
    return out["loss"], out["grad"]


def ciou(pred, gt, alpha: float | None = None) -> CIoUBreakdown:
    terms = ciou_terms(pred, gt, alpha)
    return CIoUBreakdown(**{k: float(v[0]) for k, v in terms.items()})


def ciou_loss_grad(pred, gt) -> np.ndarray:
    """Gradient of ``1 - CIoU`` w.r.t. the predicted ``(left, top, width, height)``."""
    return ciou_loss_and_grad(pred, gt)[1][0]
