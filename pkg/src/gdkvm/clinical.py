"""Ejection fraction from segmentation masks via the method of disks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_DISKS = 20


class ProfileModeError(ValueError):
    """Single-plane and biplane volumes were mixed up."""


class MaskShapeError(ValueError):
    """The mask is empty or not a single 4-connected component."""


@dataclass
class DiskProfile:
    length: float
    diam_4c: np.ndarray
    diam_2c: np.ndarray | None = None

    def __post_init__(self):
        self.diam_4c = np.asarray(self.diam_4c, dtype=np.float64)
        if self.diam_2c is not None:
            self.diam_2c = np.asarray(self.diam_2c, dtype=np.float64)
        if not self.length > 0:
            raise ValueError("long-axis length must be positive")
        if np.any(self.diam_4c < 0) or (self.diam_2c is not None and np.any(self.diam_2c < 0)):
            raise ValueError("diameters must be non-negative")

    @property
    def n_disks(self) -> int:
        return int(self.diam_4c.size)

    @property
    def biplane(self) -> bool:
        return self.diam_2c is not None


@dataclass
class EfPair:
    v_ed: float
    v_es: float

    @property
    def ef(self) -> float:
        return ejection_fraction(self.v_ed, self.v_es)


def _principal_axis(ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centroid and unit major axis (row, col) from second spatial moments."""
    pts = np.stack([ys, xs], axis=1).astype(np.float64)
    centre = pts.mean(axis=0)
    cov = np.cov((pts - centre).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    axis = evecs[:, np.argmax(evals)]
    # fixed sign so results do not depend on the eigen-solver's choice
    if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
        axis = -axis
    return centre, axis


def _chord(field: np.ndarray, centre: np.ndarray, direction: np.ndarray, reach: float,
           step: float) -> float:
    """Length between the outermost 0.5-crossings of ``field`` along a line."""
    ts = np.arange(-reach, reach + step / 2, step)
    coords = centre[:, None] + direction[:, None] * ts[None, :]
    vals = ndimage.map_coordinates(field, coords, order=1, mode="constant", cval=0.0)
    inside = np.nonzero(vals >= 0.5)[0]
    if inside.size == 0:
        return 0.0
    i0, i1 = inside[0], inside[-1]

    def crossing(i_in, i_out):
        if i_out < 0 or i_out >= ts.size:
            return ts[i_in]
        v_in, v_out = vals[i_in], vals[i_out]
        frac = (v_in - 0.5) / (v_in - v_out)
        return ts[i_in] + frac * (ts[i_out] - ts[i_in])

    return float(crossing(i1, i1 + 1) - crossing(i0, i0 - 1))


def largest_component(mask) -> np.ndarray:
    """Keep the largest 4-connected component (a common clean-up for predicted masks)."""
    m = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(m)
    if n <= 1:
        return m
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (np.argmax(sizes) + 1)


def spheroid_volume(a: float, b: float) -> float:
    """Prolate spheroid from an ellipse with semi-axes ``a`` (long) and ``b`` rotated about its long axis."""
    return 4.0 / 3.0 * np.pi * a * b * b


def extract_disks(mask, n: int = DEFAULT_DISKS, step: float = 0.05) -> DiskProfile:
    """Split a mask into ``n`` equal-height slabs perpendicular to its major axis.

    The long axis is the principal axis of the pixel second moments; its
    length is the extent of the pixel centres along it plus half a pixel
    at each end. Each diameter
    is measured along the perpendicular through the slab centre, with
    sub-pixel boundary crossings from bilinear interpolation.
    """
    m = np.asarray(mask, dtype=bool)
    if n < 1:
        raise ValueError("need at least one disk")
    if not m.any():
        raise MaskShapeError("empty mask")
    _, ncomp = ndimage.label(m)
    if ncomp != 1:
        raise MaskShapeError(f"mask has {ncomp} connected components")
    ys, xs = np.nonzero(m)
    centre, axis = _principal_axis(ys, xs)
    perp = np.array([-axis[1], axis[0]])
    proj = (ys - centre[0]) * axis[0] + (xs - centre[1]) * axis[1]
    # half a pixel beyond the extreme centres; padding by the projected square
    # instead over-counts edges that run obliquely to the pixel grid
    half = 0.5
    s_min, s_max = proj.min() - half, proj.max() + half
    length = float(s_max - s_min)
    field = m.astype(np.float64)
    reach = float(np.hypot(*m.shape))
    diams = np.empty(n)
    for i in range(n):
        s = s_min + (i + 0.5) * length / n
        diams[i] = _chord(field, centre + s * axis, perp, reach, step)
    return DiskProfile(length, diams)


def biplane_profile(mask_4c, mask_2c, n: int = DEFAULT_DISKS) -> DiskProfile:
    """Profiles from two orthogonal views; the long axis is the mean of both lengths."""
    p4 = extract_disks(mask_4c, n)
    p2 = extract_disks(mask_2c, n)
    return DiskProfile(0.5 * (p4.length + p2.length), p4.diam_4c, p2.diam_4c)


def simpson_single(profile: DiskProfile) -> float:
    if profile.biplane:
        raise ProfileModeError("biplane profile given to the single-plane formula")
    h = profile.length / profile.n_disks
    return float(np.pi / 4 * np.sum(profile.diam_4c ** 2 * h))


def simpson_biplane(profile: DiskProfile) -> float:
    if not profile.biplane:
        raise ProfileModeError("single-plane profile given to the biplane formula")
    if profile.diam_2c.size != profile.diam_4c.size:
        raise ProfileModeError("views have different disk counts")
    h = profile.length / profile.n_disks
    return float(np.pi / 4 * np.sum(profile.diam_4c * profile.diam_2c * h))


def volume(profile: DiskProfile) -> float:
    return simpson_biplane(profile) if profile.biplane else simpson_single(profile)


def ejection_fraction(v_ed: float, v_es: float) -> float:
    if not v_ed > 0:
        raise ValueError("end-diastolic volume must be positive")
    return (v_ed - v_es) / v_ed * 100.0


def agreement_stats(pred, truth) -> tuple[float, float, float]:
    """Pearson correlation, Bland-Altman bias and SD of the differences (ddof=1)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size < 2:
        raise ValueError("need two equal-length series of at least two values")
    dp, dt = p - p.mean(), t - t.mean()
    den = np.sqrt((dp * dp).sum() * (dt * dt).sum())
    if den == 0:
        raise ZeroDivisionError("correlation undefined for zero-variance input")
    corr = float((dp * dt).sum() / den)
    diff = p - t
    return corr, float(diff.mean()), float(diff.std(ddof=1))
