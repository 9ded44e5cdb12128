"""Gated delta-rule key-value memory for echocardiography video segmentation.

NumPy implementation with a small compiled core for the token scan. The
submodules are importable on their own; the names below are the common entry
points.
"""

from .attention import (MemoryState, QKVSequence, linear_matching_parallel, linear_matching_recurrent,
                        scaling_benchmark, softmax_matching)
from .clinical import (DiskProfile, agreement_stats, biplane_profile, ejection_fraction, extract_disks,
                       simpson_biplane, simpson_single)
from .kernels import BACKEND
from .kpff import FeatureMaps, kpff_fuse
from .memory import (GateValues, UpdateStrategy, apply_strategy, delta_rule_step, gate_statistics,
                     gdr_step, readout)
from .metrics import asd, dice, hausdorff, iou, mask_metrics
from .synthetic import SyntheticSpec, augment, generate
from .tensor_core import make_rng, read_tensor_file, write_tensor_file

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "DiskProfile", "FeatureMaps", "GateValues", "MemoryState", "QKVSequence", "SyntheticSpec",
    "UpdateStrategy", "agreement_stats", "apply_strategy", "asd", "augment", "biplane_profile",
    "delta_rule_step", "dice", "ejection_fraction", "extract_disks", "gate_statistics", "gdr_step",
    "generate", "hausdorff", "iou", "kpff_fuse", "linear_matching_parallel", "linear_matching_recurrent",
    "make_rng", "mask_metrics", "read_tensor_file", "readout", "scaling_benchmark", "simpson_biplane",
    "simpson_single", "softmax_matching", "write_tensor_file",
]
