"""Command-line entry point: ``gdkvm <command> [flags]``.

Exit codes: 0 success, 1 bad flags or invalid input (usage on stderr),
2 runtime failure. Every command is reproducible from its flags and
``--seed``; the only environment input is ``GDKVM_THREADS`` (worker count
for ``ablate``). Timing numbers printed by ``bench`` are measurements and
naturally vary between runs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

COMMANDS = ("gen", "train", "eval", "bench", "gradcheck", "equiv", "ef", "gatestats", "ablate")
STRATEGIES = ("baseline", "sanity", "noalpha", "nobeta", "gdr")
U64_MAX = 2 ** 64 - 1

log = logging.getLogger("gdkvm")


class UsageError(Exception):
    """Raised for invalid flags; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; this tool reserves 2 for runtime errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- flag types ------------------------------------------------------------

def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(vals) < 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError("need at least two positive lengths")
    return vals


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdkvm", description="Gated key-value memory toolkit for echo video segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_text):
        c = sub.add_parser(name, help=help_text, description=help_text)
        c.add_argument("--seed", type=_u64, default=0, help="unsigned 64-bit seed for every random draw (default 0)")
        return c

    def config(c):
        c.add_argument("--config", help="plain-text 'key = value' training config")
        c.add_argument("--strategy", choices=STRATEGIES, help="memory update strategy (overrides config)")

    c = cmd("gen", "Write a synthetic clip: frames to --out, masks to <out stem>.mask<ext>.")
    c.add_argument("--out", required=True)
    c.add_argument("--config", help="take synthetic settings from a training config")

    c = cmd("train", "Train the toy model; writes a checkpoint, its manifest and <out stem>.trace.csv.")
    config(c)
    c.add_argument("--out", required=True, help="checkpoint path")
    c.add_argument("--steps", type=int, help="override the number of training steps")

    c = cmd("eval", "Per-frame Dice/IoU/HD/ASD of a checkpoint on seeded evaluation clips (CSV).")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--videos", type=_positive, help="number of evaluation clips (default: from checkpoint)")
    c.add_argument("--out", help="CSV path (default stdout)")

    c = cmd("bench", "Runtime scaling of recurrent vs softmax matching, plus scan backend timings.")
    c.add_argument("--lengths", type=_int_list, default=[8, 16, 32, 64, 128], help="comma-separated T values")
    c.add_argument("--normalize", type=_on_off, default=False, help="recurrent form keeps the normalizer (on/off)")
    c.add_argument("--repeats", type=_positive, default=3)
    c.add_argument("--out", help="CSV path (default stdout)")

    c = cmd("gradcheck", "Finite-difference check of every toy-model parameter in 64-bit.")
    c.add_argument("--strategy", choices=STRATEGIES, default="gdr")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--out", help="CSV path (default stdout)")

    c = cmd("equiv", "Parallel vs recurrent linear matching on random instances.")
    c.add_argument("--trials", type=_positive, default=1000)

    c = cmd("ef", "Ejection fraction by the method of disks on synthetic clips (CSV).")
    c.add_argument("--cases", type=_positive, default=20)
    c.add_argument("--disks", type=_positive, default=20)
    c.add_argument("--checkpoint", help="measure on this model's predicted masks instead of the true masks")
    c.add_argument("--out", help="CSV path (default stdout)")

    c = cmd("gatestats", "Gate trace with step-to-step changes, 64-bin histograms and their correlation.")
    config(c)
    c.add_argument("--trace", help="trace CSV written by 'train' (otherwise a run is trained first)")
    c.add_argument("--out", required=True, help="trace CSV; histograms go to <out stem>.hist<ext>")

    c = cmd("ablate", "Train and evaluate every update strategy and a KPFF-off variant over several seeds.")
    c.add_argument("--config", help="plain-text training config shared by all variants")
    c.add_argument("--seeds", type=_positive, default=5)
    c.add_argument("--out", help="per-run CSV (default stdout); means go to <out stem>.means<ext>")
    return p


def _derived(path: str, tag: str, ext: str | None = None) -> str:
    stem, own = os.path.splitext(path)
    return f"{stem}.{tag}{ext or own or '.csv'}"


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _train_config(args, **extra):
    from .training import load_config

    try:
        cfg = load_config(getattr(args, "config", None), strategy=getattr(args, "strategy", None), **extra)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    return replace(cfg, seed=args.seed)


# -- commands --------------------------------------------------------------

def cmd_gen(args):
    from .synthetic import SpecError, generate
    from .tensor_core import write_tensor_file

    cfg = _train_config(args)
    try:
        spec = replace(cfg.synthetic_spec(), seed=args.seed)
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    video, masks = generate(spec)
    write_tensor_file(args.out, video)
    write_tensor_file(_derived(args.out, "mask"), masks.astype(np.uint8))
    print(f"wrote {args.out} {video.shape} and {_derived(args.out, 'mask')}")


def cmd_train(args):
    from .training import rows_to_csv, save_checkpoint, train

    cfg = _train_config(args, steps=args.steps)
    if cfg.steps < 0:
        raise UsageError("--steps must be non-negative")
    try:
        cfg.synthetic_spec()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def progress(step, loss):
        if (step + 1) % 25 == 0 or step + 1 == cfg.steps:
            log.info("step %d loss %.5f", step + 1, loss)

    result = train(cfg, progress)
    manifest = save_checkpoint(args.out, result.params, cfg)
    rows = [{"step": i + 1, "loss": lo, "alpha": a, "beta": b}
            for i, (lo, a, b) in enumerate(zip(result.losses, result.alphas, result.betas))]
    trace = _derived(args.out, "trace", ".csv")
    _emit(rows_to_csv(rows, ["step", "loss", "alpha", "beta"]), trace)
    final = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
    print(f"parameters {result.n_params}")
    print(f"final loss {final}")
    print(f"wrote {args.out}, {manifest}, {trace}")


def _load_model(path):
    from .model import ToyModel
    from .training import load_checkpoint

    try:
        params, cfg = load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    return ToyModel(cfg.model_config(), params, cfg.update_strategy), cfg


def cmd_eval(args):
    from .training import eval_set, evaluate, rows_to_csv, summarize

    model, cfg = _load_model(args.checkpoint)
    cfg = replace(cfg, seed=args.seed, eval_videos=args.videos or cfg.eval_videos)
    rows = evaluate(model, *eval_set(cfg))
    mean = {"sequence_id": "mean", "frame": "", **summarize(rows)}
    _emit(rows_to_csv(rows + [mean], ["sequence_id", "frame", "dice", "iou", "hd", "asd"]), args.out)


def cmd_bench(args):
    from . import kernels
    from .attention import scaling_benchmark
    from .training import rows_to_csv

    res = scaling_benchmark(args.lengths, seed=args.seed, repeats=args.repeats, normalize=args.normalize)
    rows = [{"T": T, "recurrent_s": r, "softmax_s": s}
            for T, r, s in zip(res.lengths, res.recurrent_seconds, res.softmax_seconds)]
    text = rows_to_csv(rows, ["T", "recurrent_s", "softmax_s"])
    text += f"slope,{res.recurrent_slope:.6f},{res.softmax_slope:.6f}\n"
    _emit(text, args.out)
    for name, secs in _backend_times(kernels, args.seed).items():
        print(f"scan backend {name}: {secs * 1e3:.3f} ms forward+backward", file=sys.stderr)


def _backend_times(kernels, seed: int) -> dict[str, float]:
    import time

    from .tensor_core import make_rng

    rng = make_rng(seed, "bench-scan")
    n, p, ck, cv = 4, 256, 16, 16
    S0 = rng.standard_normal((n, cv, ck)).astype(np.float32)
    K = rng.standard_normal((n, p, ck)).astype(np.float32)
    K /= np.linalg.norm(K, axis=-1, keepdims=True)
    V = rng.standard_normal((n, p, cv)).astype(np.float32)
    e = rng.uniform(0, 1, n).astype(np.float32)
    w = rng.uniform(0, 1, n).astype(np.float32)
    out = {}
    for name, impl in kernels.backends().items():
        best = float("inf")
        for _ in range(5):
            t0 = time.perf_counter()
            S, hist = impl.scan_forward(S0, K, V, e, w)
            impl.scan_backward(hist, K, V, e, w, np.ones_like(S))
            best = min(best, time.perf_counter() - t0)
        out[name] = best
    return out


def cmd_gradcheck(args):
    from .gradcheck import model_gradcheck
    from .training import rows_to_csv

    rows = model_gradcheck(args.strategy, seed=args.seed)
    worst = max(r["rel_error"] for r in rows)
    text = rows_to_csv(rows, ["parameter", "size", "rel_error"])
    text += f"max,,{worst:.6e}\n"
    _emit(text, args.out)
    ok = worst <= args.tolerance
    print(f"gradcheck {args.strategy}: max relative error {worst:.3e} "
          f"({'pass' if ok else 'FAIL'} at {args.tolerance:g})", file=sys.stderr)
    return 0 if ok else 2


def cmd_equiv(args):
    from .attention import equivalence_trial
    from .tensor_core import make_rng

    rng = make_rng(args.seed, "equiv")
    worst = max(equivalence_trial(rng) for _ in range(args.trials))
    print(f"trials {args.trials}")
    print(f"max deviation {worst:.3e}")
    return 0 if worst < 1e-5 else 2


def cmd_ef(args):
    from .clinical import (MaskShapeError, agreement_stats, ejection_fraction, extract_disks,
                           largest_component, simpson_single, spheroid_volume)
    from .synthetic import generate, target_axes
    from .tensor_core import make_rng
    from .training import TrainConfig, rows_to_csv

    model = None
    cfg = TrainConfig()
    if args.checkpoint:
        model, cfg = _load_model(args.checkpoint)
    rows = []
    for case in range(args.cases):
        rng = make_rng(args.seed, "ef", case)
        # each case gets its own chamber size and contraction so the EFs spread out
        major = rng.uniform(8.0, 11.0)
        spec = replace(cfg.synthetic_spec(), seed=int(rng.integers(2 ** 63)), axis_major=major,
                       axis_minor=major * rng.uniform(0.55, 0.75), amplitude=rng.uniform(0.1, 0.3))
        video, masks = generate(spec)
        axes = target_axes(spec)
        vols = axes[:, 0] * axes[:, 1] ** 2
        ed, es = int(np.argmax(vols)), int(np.argmin(vols))
        if model is not None:
            masks = model.predict(video, masks[0])
        try:
            v = [simpson_single(extract_disks(largest_component(masks[f]), args.disks)) for f in (ed, es)]
        except MaskShapeError as exc:
            log.warning("case %d skipped: %s", case, exc)
            continue
        truth = [spheroid_volume(*axes[f]) for f in (ed, es)]
        rows.append({"case_id": case, "v_ed": v[0], "v_es": v[1], "ef_pred": ejection_fraction(*v),
                     "ef_truth": ejection_fraction(*truth)})
    text = rows_to_csv(rows, ["case_id", "v_ed", "v_es", "ef_pred", "ef_truth"])
    if len(rows) >= 2:
        corr, bias, sd = agreement_stats([r["ef_pred"] for r in rows], [r["ef_truth"] for r in rows])
        text += f"summary,corr={corr:.6f},bias={bias:.6f},std={sd:.6f},\n"
    _emit(text, args.out)
    return 0 if rows else 2


def cmd_gatestats(args):
    import csv

    from .memory import gate_statistics, gate_trace_rows
    from .training import rows_to_csv, train

    if args.trace:
        try:
            with open(args.trace, newline="") as fh:
                table = list(csv.DictReader(fh))
            alphas = [float(r["alpha"]) for r in table]
            betas = [float(r["beta"]) for r in table]
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot read trace: {exc}") from None
    else:
        result = train(_train_config(args))
        alphas, betas = result.alphas, result.betas
    if not alphas:
        raise UsageError("empty gate trace")
    keys = ("step", "alpha", "beta", "grad_alpha", "grad_beta")
    rows = [dict(zip(keys, r)) for r in gate_trace_rows(alphas, betas)]
    _emit(rows_to_csv(rows, list(keys)), args.out)
    h = gate_statistics(alphas, betas)
    hist = []
    for i in range(len(h.alpha)):
        hist.append({"bin": i, "value_lo": h.edges_value[i], "value_hi": h.edges_value[i + 1],
                     "alpha": int(h.alpha[i]), "beta": int(h.beta[i]),
                     "grad_lo": h.edges_grad[i], "grad_hi": h.edges_grad[i + 1],
                     "grad_alpha": "" if h.grad_alpha is None else int(h.grad_alpha[i]),
                     "grad_beta": "" if h.grad_beta is None else int(h.grad_beta[i])})
    cols = ["bin", "value_lo", "value_hi", "alpha", "beta", "grad_lo", "grad_hi", "grad_alpha", "grad_beta"]
    _emit(rows_to_csv(hist, cols), _derived(args.out, "hist"))
    corr = h.grad_correlation
    print(f"gradient correlation {'undefined' if np.isnan(corr) else f'{corr:.6f}'}")


def cmd_ablate(args):
    from .training import ablation_means, ablation_suite, rows_to_csv

    cfg = _train_config(args)
    rows = ablation_suite(cfg, seeds=args.seeds)
    cols = ["variant", "seed", "final_loss", "dice", "iou", "hd", "asd"]
    _emit(rows_to_csv(rows, cols), args.out)
    means = [{"variant": k, **v} for k, v in ablation_means(rows).items()]
    text = rows_to_csv(means, ["variant", "dice", "iou", "hd", "asd"])
    if args.out:
        _emit(text, _derived(args.out, "means"))
    else:
        sys.stderr.write(text)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        code = HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"gdkvm {args.command}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure: report, never a traceback by default
        log.debug("failure", exc_info=True)
        print(f"gdkvm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
