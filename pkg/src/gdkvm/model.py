"""Toy video segmenter built around the gated key-value memory.

Per frame: a strided conv key encoder (optionally fused with a pixel branch
by KPFF) gives keys, bounded by tanh and offset by a learned positional term;
a value encoder reads the frame together with a mask; a ``C_v x C_k``
memory state is written token by token; the decoder upsamples the memory
readout back to a per-pixel logit map, with a 3x3 projection of the readout
added straight onto the coarse logits. Apart from a one-channel skip conv of
the raw frame, the decoder sees the frame only through the memory.

Only the first frame's ground-truth mask enters the forward pass. Later
frames are written with the model's own predicted probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .kpff import kpff_fuse_node
from .memory import UpdateStrategy


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    ck: int = 16
    cv: int = 16
    width: int = 8
    dec_width: int = 8
    kpff: bool = True

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _conv_init(rng, k, cin, cout, dtype):
    std = 1.0 / np.sqrt(k * k * cin)
    return (std * rng.standard_normal((k, k, cin, cout))).astype(dtype), np.zeros(cout, dtype=dtype)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}

    def conv(name, k, cin, cout):
        p[name + ".w"], p[name + ".b"] = _conv_init(rng, k, cin, cout, dtype)

    conv("key.c1", 3, 3, cfg.width)
    conv("key.c2", 3, cfg.width, cfg.ck)
    p["key.pos"] = position_code(cfg.resolution // 4, cfg.ck, dtype)
    conv("val.c1", 3, 3, cfg.width)
    # mask channel of the first value conv, kept apart because only it carries gradient
    p["val.mask.w"] = (rng.standard_normal((3, 3, 1, cfg.width)) / 6.0).astype(dtype)
    conv("val.c2", 3, cfg.width, cfg.cv - 1)
    # the KPFF parameters are drawn even when the module is switched off so
    # that both variants share every other initial weight for a given seed
    conv("kpff.gate", 3, cfg.ck, cfg.ck)
    conv("kpff.pix", 1, 1, cfg.ck)
    p["kpff.gate.b"][:] = 0
    if not cfg.kpff:
        for k in [k for k in p if k.startswith("kpff.")]:
            del p[k]
    n = cfg.cv + cfg.ck
    p["gate.w_alpha"] = (0.01 * rng.standard_normal(n)).astype(dtype)
    p["gate.w_beta"] = (0.01 * rng.standard_normal(n)).astype(dtype)
    p["gate.b_alpha"] = np.array([np.log(0.95 / 0.05)], dtype=dtype)
    p["gate.b_beta"] = np.zeros(1, dtype=dtype)
    conv("dec.c1", 3, cfg.cv, cfg.dec_width)
    conv("dec.c2", 3, cfg.dec_width, cfg.dec_width // 2)
    conv("dec.out", 1, cfg.dec_width // 2, 1)
    conv("dec.skip", 3, 1, 1)
    conv("dec.prior", 3, cfg.cv, 1)
    return p


def position_code(h: int, ck: int, dtype=np.float32) -> np.ndarray:
    """Initial positional key term ``(h, h, ck)``: channel ``c`` is a log-Gaussian bump.

    Bump centres sit on a regular grid over the token map. Since phi is
    ``exp`` for negative inputs, phi of this code is a set of Gaussian
    receptive fields, so keys of distant tokens start out nearly orthogonal.
    """
    g = int(np.ceil(np.sqrt(ck)))
    spacing = h / g
    centres = (np.arange(g) + 0.5) * spacing
    cy, cx = (a.ravel()[:ck] for a in np.meshgrid(centres, centres, indexing="ij"))
    yy, xx = np.mgrid[0:h, 0:h] + 0.0
    d2 = (yy[..., None] - cy) ** 2 + (xx[..., None] - cx) ** 2
    return (-d2 / (2 * (0.5 * spacing) ** 2)).astype(dtype)


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def coord_grid(n: int, h: int, dtype) -> np.ndarray:
    lin = np.linspace(-1.0, 1.0, h, dtype=dtype)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    return np.broadcast_to(np.stack([yy, xx], axis=-1), (n, h, h, 2)).copy()


@dataclass
class ForwardResult:
    logits: list  # per-frame Nodes (N, H, W, 1)
    alphas: list[np.ndarray]  # per write, shape (N,)
    betas: list[np.ndarray]
    states: list  # memory state Node after each write
    reads: list = field(default_factory=list)  # per-frame memory readout Nodes (N, h, w, C_v)


class ToyModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray],
                 strategy: UpdateStrategy = UpdateStrategy.GDR):
        self.cfg = cfg
        self.params = params
        self.strategy = strategy

    @classmethod
    def create(cls, cfg: ModelConfig, seed_rng: np.random.Generator,
               strategy: UpdateStrategy = UpdateStrategy.GDR, dtype=np.float32) -> "ToyModel":
        return cls(cfg, init_params(cfg, seed_rng, dtype), strategy)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "ToyModel":
        return ToyModel(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()}, self.strategy)

    # -- building blocks -------------------------------------------------

    def _conv(self, P, name, x, stride=1):
        return ag.conv2d(x, P[name + ".w"], P[name + ".b"], stride=stride)

    def _keys(self, P, frame, coords):
        x = ag.concat([frame, coords], axis=-1)
        # raw content features; the memory keys squash them with tanh so the
        # positional term keeps its say
        fk = self._conv(P, "key.c2", ag.tanh(self._conv(P, "key.c1", x, 2)), 2)
        if self.cfg.kpff:
            fpix = self._conv(P, "kpff.pix", ag.avgpool(frame, 4))
            fk = kpff_fuse_node(fk, fpix, P["kpff.gate.w"], P["kpff.gate.b"])
        return fk

    def _value_base(self, P, frames, coords):
        # the frame and coordinate part of the first value conv never sees the mask
        return self._conv(P, "val.c1", ag.concat([frames, coords], axis=-1), 2)

    def _values(self, P, base, mask):
        zero = mask.tape.constant(np.zeros(self.cfg.width, dtype=mask.value.dtype))
        h = base + ag.conv2d(mask, P["val.mask.w"], zero, stride=2)
        enc = ag.tanh(self._conv(P, "val.c2", ag.tanh(h), 2))
        # the last value channel is the mask itself at token resolution, so the
        # readout carries how much of each remembered region was foreground
        return ag.concat([enc, ag.avgpool(mask, 4)], axis=-1)

    def _gates(self, P, S):
        summary = ag.concat([ag.mean(S, axis=2), ag.mean(S, axis=1)], axis=-1)
        alpha = ag.sigmoid(summary @ P["gate.w_alpha"] + P["gate.b_alpha"])
        beta = ag.sigmoid(summary @ P["gate.w_beta"] + P["gate.b_beta"])
        return alpha, beta

    def _write(self, P, S, keys_flat, values_flat, res: ForwardResult):
        n = S.shape[0]
        tape = S.tape
        alpha, beta = self._gates(P, S)
        res.alphas.append(alpha.value.copy())
        res.betas.append(beta.value.copy())
        tape.observe("alpha", alpha)
        tape.observe("beta", beta)
        one = tape.constant(np.ones(n, dtype=S.value.dtype))
        zero = tape.constant(np.zeros(n, dtype=S.value.dtype))
        st = self.strategy
        if st.uses_alpha:
            S = S * ag.reshape(alpha, (n, 1, 1))
        erase = {UpdateStrategy.BASELINE: zero, UpdateStrategy.SANITY: one,
                 UpdateStrategy.NO_BETA: zero}.get(st, beta)
        write = beta if st.uses_beta else one
        return ag.memory_scan(S, keys_flat, values_flat, erase, write)

    def _decode(self, P, readout, skip):
        # the decoder sees the frame only through the thin skip conv; handing it the
        # key features as well let it segment any dark chamber and ignore the memory
        x = ag.upsample2(ag.tanh(self._conv(P, "dec.c1", readout)))
        x = ag.tanh(self._conv(P, "dec.c2", x))
        # the coarse logit is projected before the last upsampling; a 3x3 conv
        # of the raw frame restores full-resolution boundary detail
        coarse = self._conv(P, "dec.out", x) + ag.upsample2(self._conv(P, "dec.prior", readout))
        return ag.upsample2(coarse) + skip

    # -- full pass --------------------------------------------------------

    def forward(self, video: np.ndarray, first_mask: np.ndarray, tape: ag.Tape | None = None,
                params: dict[str, np.ndarray] | None = None) -> tuple[ag.Tape, ForwardResult]:
        """Run the clip frame by frame.

        ``video`` is ``(N, T, H, W, 1)`` (or unbatched ``(T, H, W, 1)``) and
        ``first_mask`` the matching frame-0 mask. Frame 0 is written with the
        given mask and then read back; every later frame is read from the
        memory of earlier frames, predicted, and written with its own
        predicted probabilities.
        """
        if video.ndim == 4:
            video = video[None]
            first_mask = np.asarray(first_mask)[None]
        n, T, H, W, _ = video.shape
        if H != self.cfg.resolution or W != H or H % 4:
            raise ValueError(f"frames must be {self.cfg.resolution}x{self.cfg.resolution}, got {H}x{W}")
        if first_mask.shape != (n, H, W):
            raise ValueError(f"first mask shape {first_mask.shape} does not match frames")
        dtype = self.dtype
        tape = tape or ag.Tape()
        P = {k: tape.param(k, v) for k, v in (params or self.params).items()}
        h4 = H // 4
        tokens = h4 * h4
        ck, cv = self.cfg.ck, self.cfg.cv
        # everything that depends on the frames alone runs once over the whole clip
        frames = tape.constant(video.reshape(n * T, H, W, 1).astype(dtype, copy=False))
        coords = tape.constant(coord_grid(n * T, H, dtype))

        def per_frame(node):
            return ag.reshape(node, (n, T) + node.shape[1:])

        # content features of every frame at once; the memory keys add the positional term
        feats_all = per_frame(self._keys(P, frames, coords))
        vbase_all = per_frame(self._value_base(P, frames, coords))
        skip_all = per_frame(self._conv(P, "dec.skip", frames))
        S = tape.constant(np.zeros((n, cv, ck), dtype=dtype))
        res = ForwardResult([], [], [], [])
        for t in range(T):
            feats = ag.select(feats_all, t)
            keys = ag.tanh(feats) + P["key.pos"]
            khat = ag.normalize_rows(ag.phi(ag.reshape(keys, (n, tokens, ck))))
            if t == 0:
                mask = tape.constant(first_mask.astype(dtype)[..., None])
                vals = ag.reshape(self._values(P, ag.select(vbase_all, t), mask), (n, tokens, cv))
                S = self._write(P, S, khat, vals, res)
                res.states.append(S)
            read = ag.reshape(khat @ ag.transpose(S, (0, 2, 1)), (n, h4, h4, cv))
            res.reads.append(read)
            logit = self._decode(P, read, ag.select(skip_all, t))
            res.logits.append(logit)
            if 0 < t < T - 1:
                prob = ag.sigmoid(logit)
                vals = ag.reshape(self._values(P, ag.select(vbase_all, t), prob), (n, tokens, cv))
                S = self._write(P, S, khat, vals, res)
                res.states.append(S)
        return tape, res

    def predict(self, video: np.ndarray, first_mask: np.ndarray) -> np.ndarray:
        """Binary masks ``(N, T, H, W)`` (logit > 0)."""
        batched = video.ndim == 5
        _, res = self.forward(video, first_mask)
        out = np.stack([lg.value[..., 0] > 0 for lg in res.logits], axis=1)
        return out if batched else out[0]


def segmentation_loss(logits: list, masks: np.ndarray, supervised=(0, -1), eps: float = 1e-6):
    """Mean over supervised frames of ``(BCE + soft Dice) / 2``.

    ``masks`` is ``(N, T, H, W)``. Soft Dice is computed per clip and averaged.
    """
    frames = sorted({f % len(logits) for f in supervised})
    if not frames:
        raise ValueError("empty supervision set")
    total = None
    for f in frames:
        z = logits[f]
        y = z.tape.constant(masks[:, f].astype(z.value.dtype)[..., None])
        ce = ag.bce_with_logits(z, y)
        p = ag.sigmoid(z)
        inter = ag.sum(p * y, axis=(1, 2, 3))
        den = ag.sum(p, axis=(1, 2, 3)) + ag.sum(y, axis=(1, 2, 3)) + eps
        sd = 1.0 - ag.mean(2.0 * inter / den)
        term = (ce + sd) * 0.5
        total = term if total is None else total + term
    return total * (1.0 / len(frames))
