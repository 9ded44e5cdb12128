"""Echo-like synthetic videos: pulsating dark chambers in speckled tissue.

Each video holds a target chamber (the labelled ventricle) and optional
distractor chambers of similar size and appearance. Only the target is in
the mask, so a model must use the first-frame annotation to know which dark
blob to follow.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy import ndimage

from .tensor_core import make_rng


class SpecError(ValueError):
    """Synthetic parameters that cannot produce a valid video."""


@dataclass(frozen=True)
class SyntheticSpec:
    frames: int = 10
    resolution: int = 64
    axis_major: float = 11.0
    axis_minor: float = 7.0
    amplitude: float = 0.3
    period: float = 0.0  # frames per cardiac cycle; 0 means one cycle over the clip
    speckle: float = 1.0
    drift: float = 2.0  # total centre displacement over the clip, pixels
    distractors: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise SpecError("need at least two frames")
        if not 0 <= self.amplitude < 1:
            raise SpecError("pulsation amplitude must lie in [0, 1)")
        if self.resolution < 8 or self.resolution % 4:
            raise SpecError("resolution must be a multiple of 4, at least 8")
        if self.axis_minor <= 0 or self.axis_major < self.axis_minor:
            raise SpecError("need 0 < axis_minor <= axis_major")
        reach = 2 * self.axis_major * (1 + self.amplitude) + self.drift
        if reach > self.resolution - 2:
            raise SpecError("ellipse can leave the frame; shrink the axes or drift")

    @property
    def cycle(self) -> float:
        return self.period if self.period > 0 else float(self.frames)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _ellipse(shape, cy, cx, a, b, theta) -> np.ndarray:
    """Filled ellipse; ``cy``, ``cx``, ``a``, ``b`` may be length-T arrays for a stack of frames."""
    cy, cx, a, b = (np.asarray(v, dtype=np.float64)[..., None, None] for v in (cy, cx, a, b))
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place(rng, spec: SyntheticSpec, count: int) -> list[tuple[float, float]]:
    """Centres for ``count`` chambers that never overlap at peak dilation."""
    r = spec.axis_major * (1 + spec.amplitude)
    lo, hi = r + 1 + spec.drift / 2, spec.resolution - r - 2 - spec.drift / 2
    for _ in range(1000):
        pts = rng.uniform(lo, hi, size=(count, 2))
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        if count == 1 or d[np.triu_indices(count, 1)].min() > 2 * r + 2:
            return [(float(y), float(x)) for y, x in pts]
    raise SpecError("could not place non-overlapping chambers; reduce distractors or axes")


def generate(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(video, masks)``: float32 ``T x H x W x 1`` in [0, 1] and bool ``T x H x W``."""
    rng = make_rng(spec.seed, "synthetic")
    T, H = spec.frames, spec.resolution
    chambers = []
    for idx, (cy, cx) in enumerate(_place(rng, spec, 1 + spec.distractors)):
        theta = rng.uniform(0, np.pi)
        phase = 0.0 if idx == 0 else rng.uniform(0.5 * np.pi, 1.5 * np.pi)
        chambers.append((cy, cx, theta, phase))
    heading = rng.uniform(0, 2 * np.pi)
    drift_dir = np.array([np.sin(heading), np.cos(heading)])
    # tissue brightness ramps with depth and a random lateral tilt
    yy, xx = np.mgrid[0:H, 0:H] / (H - 1)
    tilt = rng.uniform(-0.15, 0.15)
    tissue = 0.55 + 0.25 * (1 - yy) + tilt * (xx - 0.5)
    t = np.arange(T)
    offset = spec.drift * (t / max(T - 1, 1) - 0.5)[:, None] * drift_dir  # (T, 2)
    img = np.broadcast_to(tissue, (T, H, H))
    masks = None
    for cy, cx, theta, phase in chambers:
        scale = 1 + spec.amplitude * np.sin(2 * np.pi * t / spec.cycle + phase)
        region = _ellipse((H, H), cy + offset[:, 0], cx + offset[:, 1],
                          spec.axis_major * scale, spec.axis_minor * scale, theta)
        img = np.where(region, 0.12, img)
        if masks is None:
            masks = region
    img = ndimage.gaussian_filter(img, (0, 0.8, 0.8))
    if spec.speckle > 0:
        # fully developed speckle: mean-one gamma with shape 4
        g = rng.gamma(4.0, 0.25, size=(T, H, H))
        img = img * (1 + spec.speckle * (g - 1))
    video = np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]
    return video, masks


def target_axes(spec: SyntheticSpec) -> np.ndarray:
    """Semi-axes ``(major, minor)`` of the target chamber at every frame, shape ``(T, 2)``."""
    t = np.arange(spec.frames)
    scale = 1 + spec.amplitude * np.sin(2 * np.pi * t / spec.cycle)
    return np.stack([spec.axis_major * scale, spec.axis_minor * scale], axis=1)


def generate_batch(spec: SyntheticSpec, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    vids, msks = [], []
    for i in range(count):
        v, m = generate(replace(spec, seed=int(make_rng(seed, "video", i).integers(2 ** 63))))
        vids.append(v)
        msks.append(m)
    return np.stack(vids), np.stack(msks)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    gamma: float | None = None
    scale: float | None = None
    angle: float | None = None  # degrees
    contrast: float | None = None


def draw_augment(rng: np.random.Generator, p: float = 0.5) -> AugmentDraw:
    """Each transform independently switched on with probability ``p``."""
    on = rng.random(4) < p
    vals = (rng.uniform(0.7, 1.5), rng.uniform(0.9, 1.1), rng.uniform(-15, 15), rng.uniform(0.8, 1.2))
    return AugmentDraw(*(v if o else None for v, o in zip(vals, on)))


def _affine(img: np.ndarray, scale: float, angle_deg: float, order: int) -> np.ndarray:
    """Rotate and scale about the centre of the last two axes; a leading axis is left alone."""
    h, w = img.shape[-2:]
    th = np.deg2rad(angle_deg)
    # output->input mapping: inverse rotation and inverse scale about the centre
    rot = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]]) / scale
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = c - rot @ c
    if img.ndim == 3:
        full = np.eye(3)
        full[1:, 1:] = rot
        rot, offset = full, np.concatenate([[0.0], offset])
    return ndimage.affine_transform(img, rot, offset=offset, order=order, mode="nearest")


def geometric(img: np.ndarray, scale: float = 1.0, angle: float = 0.0, order: int = 1) -> np.ndarray:
    return _affine(img, scale, angle, order)


def augment(video: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
            p: float = 0.5) -> tuple[np.ndarray, np.ndarray, AugmentDraw]:
    """Apply gamma, scaling, rotation and contrast, each with probability ``p``.

    One draw is shared by every frame of the clip. Intensity transforms leave
    the masks alone; geometric ones warp masks with nearest-neighbour
    sampling so they stay binary.
    """
    d = draw_augment(rng, p)
    vid = video.astype(np.float32, copy=True)
    msk = masks.copy()
    if d.scale is not None or d.angle is not None:
        s = d.scale or 1.0
        a = d.angle or 0.0
        vid[..., 0] = _affine(vid[..., 0], s, a, order=1)
        msk = _affine(msk.astype(np.float64), s, a, order=0) > 0.5
    if d.gamma is not None:
        vid = np.power(np.clip(vid, 0, 1), d.gamma, dtype=np.float32)
    if d.contrast is not None:
        mu = vid.mean()
        vid = (vid - mu) * d.contrast + mu
    return np.clip(vid, 0, 1).astype(np.float32), msk, d
