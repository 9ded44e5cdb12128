"""Overlap and boundary-distance metrics for binary masks.

Masks are 2-D boolean arrays. The boundary of a mask is the set of its
pixels with at least one 4-neighbour outside the mask or outside the image.
Distances are Euclidean, in pixels times an optional ``spacing``.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .tensor_core import DimensionError


class UndefinedMetricError(ValueError):
    """Boundary metrics need both masks to be non-empty."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each ``src`` boundary pixel (raster order) to the nearest ``dst`` boundary pixel."""
    # indices of the nearest feature pixel; the distance itself is recomputed
    # from integer offsets so the result is exactly sqrt(dy^2 + dx^2)
    _, (iy, ix) = ndimage.distance_transform_edt(~dst, return_indices=True)
    ys, xs = np.nonzero(src)
    dy = (ys - iy[ys, xs]).astype(np.float64)
    dx = (xs - ix[ys, xs]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def _boundaries(a, b):
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("boundary distance of an empty mask is undefined")
    return boundary(a), boundary(b)


def hausdorff(a, b, spacing: float = 1.0) -> float:
    ba, bb = _boundaries(a, b)
    return spacing * float(max(_directed(ba, bb).max(), _directed(bb, ba).max()))


def asd(a, b, spacing: float = 1.0) -> float:
    """Mean of the two directed mean boundary distances."""
    ba, bb = _boundaries(a, b)
    return spacing * float((_directed(ba, bb).mean() + _directed(bb, ba).mean()) / 2.0)


def mask_metrics(pred, truth, spacing: float = 1.0) -> dict[str, float]:
    """Dice, IoU, HD and ASD for one mask pair.

    An empty prediction against a non-empty truth (or vice versa) has no
    boundary distance; HD and ASD are then reported as the image diagonal so
    that averages still penalise the miss.
    """
    pred, truth = _pair(pred, truth)
    out = {"dice": dice(pred, truth), "iou": iou(pred, truth)}
    if pred.any() and truth.any():
        out["hd"] = hausdorff(pred, truth, spacing)
        out["asd"] = asd(pred, truth, spacing)
    elif not pred.any() and not truth.any():
        out["hd"] = out["asd"] = 0.0
    else:
        diag = spacing * float(np.hypot(*pred.shape))
        out["hd"] = out["asd"] = diag
    return out
