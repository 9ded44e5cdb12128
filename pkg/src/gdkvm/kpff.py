"""Key-pixel feature fusion.

A gated blend of local key features plus their broadcast global average
against a pixel-level branch::

    glob  = expand(gap(f_key))
    gate  = sigmoid(conv3x3(f_key + glob))
    fused = gate * (f_key + glob) + (1 - gate) * f_pix
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .tensor_core import DimensionError, conv2d, expand_spatial, gap_spatial, sigmoid


@dataclass
class FeatureMaps:
    f_key: np.ndarray  # H x W x C (or N x H x W x C)
    f_pix: np.ndarray
    gate_w: np.ndarray  # k x k x C x C
    gate_b: np.ndarray  # C

    def __post_init__(self):
        if self.f_key.shape != self.f_pix.shape:
            raise DimensionError(f"branch shapes differ: {self.f_key.shape} vs {self.f_pix.shape}")
        c = self.f_key.shape[-1]
        if self.gate_w.shape[2:] != (c, c) or self.gate_b.shape != (c,):
            raise DimensionError("gate conv must map C -> C channels")


def kpff_gate(maps: FeatureMaps) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(gate, local_plus_global)``."""
    fk = maps.f_key
    h, w = fk.shape[-3], fk.shape[-2]
    local_global = fk + expand_spatial(gap_spatial(fk), h, w)
    gate = sigmoid(conv2d(local_global, maps.gate_w, maps.gate_b))
    return gate, local_global


def kpff_fuse(maps: FeatureMaps) -> np.ndarray:
    gate, lg = kpff_gate(maps)
    return gate * lg + (1 - gate) * maps.f_pix


def kpff_fuse_node(f_key: ag.Node, f_pix: ag.Node, gate_w: ag.Node, gate_b: ag.Node) -> ag.Node:
    """Differentiable version over ``(N, H, W, C)`` nodes."""
    _, h, w, _ = f_key.shape
    lg = f_key + ag.expand(ag.gap(f_key), h, w)
    gate = ag.sigmoid(ag.conv2d(lg, gate_w, gate_b))
    return gate * lg + (1.0 - gate) * f_pix
