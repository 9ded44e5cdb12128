"""End-to-end finite-difference check of the toy model in 64-bit."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .memory import UpdateStrategy
from .model import ModelConfig, ToyModel, segmentation_loss
from .synthetic import SyntheticSpec, generate_batch
from .tensor_core import make_rng

# small enough that central differences over every parameter take seconds
CHECK_MODEL = ModelConfig(resolution=16, ck=4, cv=3, width=3, dec_width=4, kpff=True)
CHECK_DATA = SyntheticSpec(frames=3, resolution=16, axis_major=3, axis_minor=2, distractors=0, drift=1)


def model_gradcheck(strategy="gdr", seed: int = 0, model_cfg: ModelConfig = CHECK_MODEL,
                    spec: SyntheticSpec = CHECK_DATA, batch: int = 2, h: float = 1e-5) -> list[dict]:
    """Relative error between tape gradients and central differences, one row per parameter.

    The check uses the exact derivative of the key normalisation
    (``full_norm_grad``) so the analytic side is the true gradient of the loss.
    """
    st = UpdateStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    video, masks = generate_batch(spec, batch, make_rng(seed, "gradcheck-data").integers(2 ** 63))
    video = video.astype(np.float64)
    model = ToyModel.create(model_cfg, make_rng(seed, "gradcheck-init"), st, dtype=np.float64)

    def loss(params):
        tape, res = model.forward(video, masks[:, 0], tape=ag.Tape(full_norm_grad=True), params=params)
        return tape, segmentation_loss(res.logits, masks)

    tape, root = loss(model.params)
    analytic = tape.backward(root)
    numeric = ag.finite_difference(lambda p: float(loss(p)[1].value), model.params, h=h)
    return [{"parameter": k, "size": int(v.size), "rel_error": ag.relative_error(analytic[k], numeric[k])}
            for k, v in sorted(model.params.items())]
