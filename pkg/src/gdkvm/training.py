"""Training protocol, evaluation and the update-strategy ablation driver."""

from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autograd as ag
from .memory import UpdateStrategy, gate_trace_rows
from .metrics import mask_metrics
from .model import ModelConfig, ToyModel, param_count, segmentation_loss
from .synthetic import SyntheticSpec, augment, generate_batch
from .tensor_core import make_rng, read_tensor, write_tensor

log = logging.getLogger("gdkvm")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    steps: int = 300
    batch: int = 4
    lr: float = 1e-2
    schedule: str = "cosine"
    weight_decay: float = 1e-2
    clip: float = 3.0
    augment: bool = True
    augment_p: float = 0.5
    # model
    strategy: str = "gdr"
    kpff: bool = True
    ck: int = 16
    cv: int = 16
    width: int = 8
    dec_width: int = 8
    # data
    frames: int = 10
    resolution: int = 64
    axis_major: float = 10.0
    axis_minor: float = 6.5
    amplitude: float = 0.3
    speckle: float = 1.0
    drift: float = 8.0
    distractors: int = 1
    # evaluation
    eval_videos: int = 16
    eval_every: int = 0
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.resolution, self.ck, self.cv, self.width, self.dec_width, self.kpff)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(frames=self.frames, resolution=self.resolution, axis_major=self.axis_major,
                             axis_minor=self.axis_minor, amplitude=self.amplitude, speckle=self.speckle,
                             drift=self.drift, distractors=self.distractors)

    @property
    def update_strategy(self) -> UpdateStrategy:
        return UpdateStrategy.parse(self.strategy)

    def to_lines(self) -> list[str]:
        return [f"{k} = {_fmt(v)}" for k, v in asdict(self).items()]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind, raw: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(kinds[key], value)
    cfg = replace(base or TrainConfig(), **updates)
    cfg.update_strategy  # validates the name
    learning_rate(cfg, 0)  # and the schedule
    return cfg


def load_config(path: str | None, **overrides) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        with open(path) as fh:
            cfg = parse_config_text(fh.read(), cfg)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# Checkpoints: concatenated GDKV-T blobs plus a text manifest
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: dict[str, np.ndarray], cfg: TrainConfig) -> str:
    names = sorted(params)
    with open(path, "wb") as fh:
        for name in names:
            write_tensor(fh, params[name])
    manifest = path + ".manifest"
    with open(manifest, "w") as fh:
        fh.write("# gdkvm checkpoint manifest\n")
        for line in cfg.to_lines():
            fh.write(f"config {line}\n")
        for name in names:
            fh.write(f"tensor {name} {'x'.join(map(str, params[name].shape))}\n")
    return manifest


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], TrainConfig]:
    names, cfg_lines = [], []
    with open(path + ".manifest") as fh:
        for line in fh:
            if line.startswith("config "):
                cfg_lines.append(line[len("config "):])
            elif line.startswith("tensor "):
                names.append(line.split()[1])
    params = {}
    with open(path, "rb") as fh:
        for name in names:
            arr = read_tensor(fh)
            if arr is None:
                raise ValueError(f"{path}: missing tensor {name}")
            params[name] = arr.astype(np.float32)
    return params, parse_config_text("".join(cfg_lines))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]
    alphas: list[float]
    betas: list[float]
    evals: list[tuple[int, dict[str, float]]]
    n_params: int

    def gate_rows(self):
        return gate_trace_rows(self.alphas, self.betas)


def build_model(cfg: TrainConfig) -> ToyModel:
    return ToyModel.create(cfg.model_config(), make_rng(cfg.seed, "init"), cfg.update_strategy)


def train_step(model: ToyModel, opt: ag.AdamW, video, masks, clip: float):
    tape, res = model.forward(video, masks[:, 0])
    loss = segmentation_loss(res.logits, masks)
    value = float(loss.value)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {opt.step_count + 1}")
    grads = tape.backward(loss)
    grads = ag.clip_global_norm({k: grads[k] for k in model.params}, clip)
    model.params = opt.step(model.params, grads)
    alpha = float(np.mean(res.alphas)) if res.alphas else float("nan")
    beta = float(np.mean(res.betas)) if res.betas else float("nan")
    return value, alpha, beta


def training_batch(cfg: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    spec = cfg.synthetic_spec()
    video, masks = generate_batch(spec, cfg.batch, make_rng(cfg.seed, "train", step).integers(2 ** 63))
    if cfg.augment:
        rng = make_rng(cfg.seed, "augment", step)
        out = [augment(video[i], masks[i], rng, cfg.augment_p) for i in range(cfg.batch)]
        video = np.stack([o[0] for o in out])
        masks = np.stack([o[1] for o in out])
    return video, masks


def eval_set(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    # evaluation clips depend only on the seed, never on the training stream
    return generate_batch(cfg.synthetic_spec(), cfg.eval_videos, make_rng(cfg.seed, "eval").integers(2 ** 63))


SCHEDULES = ("constant", "cosine")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Step size for 0-based ``step``; cosine decays from ``lr`` towards zero."""
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * step / max(cfg.steps, 1)))
    raise ValueError(f"unknown schedule {cfg.schedule!r}; expected one of {SCHEDULES}")


def _data_key(cfg: TrainConfig) -> tuple:
    # every field that shapes the training stream; runs agreeing on these see identical batches
    return (cfg.seed, cfg.steps, cfg.batch, cfg.augment, cfg.augment_p, cfg.synthetic_spec())


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    return train_group([cfg], progress)[0]


def train_group(cfgs: list[TrainConfig], progress=None) -> list[TrainResult]:
    """Train several runs that share one data stream, step by step in lockstep.

    Each run keeps its own model and optimiser, so every result equals what
    :func:`train` gives for that config alone; the batches are simply
    generated once per step instead of once per run. ``progress(step, loss)``
    receives the first run's loss.
    """
    if not cfgs:
        return []
    if len({_data_key(c) for c in cfgs}) != 1:
        raise ValueError("runs in a group must share seed, steps, batch, augmentation and data spec")
    runs = []
    for cfg in cfgs:
        model = build_model(cfg)
        log.info("model %s/%s kpff=%s: %d parameters", cfg.strategy, cfg.resolution, cfg.kpff,
                 param_count(model.params))
        runs.append((cfg, model, ag.AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay),
                     TrainResult(model.params, [], [], [], [], param_count(model.params))))
    head = cfgs[0]
    data = eval_set(head) if any(c.eval_every for c in cfgs) else None
    for step in range(head.steps):
        video, masks = training_batch(head, step)
        for i, (cfg, model, opt, res) in enumerate(runs):
            opt.lr = learning_rate(cfg, step)
            loss, a, b = train_step(model, opt, video, masks, cfg.clip)
            res.losses.append(loss)
            res.alphas.append(a)
            res.betas.append(b)
            if progress and i == 0:
                progress(step, loss)
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                res.evals.append((step + 1, summarize(evaluate(model, *data))))
    for _, model, _, res in runs:
        res.params = model.params
    return [r for *_, r in runs]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

EVAL_CHUNK = 8


def evaluate(model: ToyModel, videos: np.ndarray, masks: np.ndarray) -> list[dict]:
    """Per-frame metrics for frames 1..T-1 of every clip (frame 0 is the given mask)."""
    rows = []
    for start in range(0, len(videos), EVAL_CHUNK):
        v = videos[start:start + EVAL_CHUNK]
        m = masks[start:start + EVAL_CHUNK]
        pred = model.predict(v, m[:, 0])
        for i in range(len(v)):
            for t in range(1, v.shape[1]):
                row = {"sequence_id": start + i, "frame": t}
                row.update(mask_metrics(pred[i, t], m[i, t]))
                rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict[str, float]:
    keys = ("dice", "iou", "hd", "asd")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = [
    ("baseline", "baseline", True),
    ("sanity", "sanity", True),
    ("noalpha", "noalpha", True),
    ("nobeta", "nobeta", True),
    ("gdr", "gdr", True),
    ("gdr-nokpff", "gdr", False),
]


def _run_seed(jobs):
    """Train one seed's variants in lockstep and evaluate each."""
    results = train_group([cfg for _, cfg in jobs])
    out = []
    for (name, cfg), result in zip(jobs, results):
        model = ToyModel(cfg.model_config(), result.params, cfg.update_strategy)
        summary = summarize(evaluate(model, *eval_set(cfg)))
        out.append((name, cfg.seed, summary, result.losses[-1] if result.losses else float("nan")))
    return out


def ablation_suite(cfg: TrainConfig, seeds: int = 5, threads: int | None = None,
                   variants=ABLATION_VARIANTS) -> list[dict]:
    """Train and evaluate every variant under identical seeds and budgets.

    Seed ``i`` uses ``cfg.seed + i`` for initialisation, training data and
    the evaluation set, so variants differ only in their update rule or the
    KPFF switch. The variants of one seed share a data stream and train in
    lockstep. Seeds run in worker processes when ``threads`` (or the
    ``GDKVM_THREADS`` environment variable) exceeds one; results are the same
    either way.
    """
    groups = []
    for i in range(seeds):
        groups.append([(name, replace(cfg, seed=cfg.seed + i, strategy=strategy, kpff=kpff))
                       for name, strategy, kpff in variants])
    if threads is None:
        threads = int(os.environ.get("GDKVM_THREADS", "1") or 1)
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_run_seed, groups))
    else:
        results = [_run_seed(g) for g in groups]
    return [{"variant": n, "seed": s, "final_loss": fl, **summ}
            for group in results for n, s, summ, fl in group]


def ablation_means(rows: list[dict]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        out[name] = {k: float(np.mean([r[k] for r in sel])) for k in ("dice", "iou", "hd", "asd")}
    return out


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for r in rows:
        buf.write(",".join(_cell(r.get(c, "")) for c in columns) + "\n")
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
