"""Command-line entry point: ``changealign <command> ...``.

Every command exits 0 on success. On failure it writes one JSON line
``{"error": <type>, "message": <text>}`` to stderr and exits nonzero
(2 for bad input, 3 for diverged training, 1 for failed gradient checks).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checks
from .fileformats import write_pnm
from .pipeline import Model, ModelConfig, TrainingDiverged, evaluate, infer, overlay, predict, train
from .synthgen import SceneSpec, WARP_KINDS, gen_dataset, load_dataset, write_dataset

EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    pass


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    spec = SceneSpec.from_dict(
        {
            "size": (args.size, args.size),
            "warp": {"kind": args.warp, "max_displacement": args.max_disp},
            "radiometric": {"noise_std": args.noise_std},
            "changes": {"n_objects": args.objects},
        }
    )
    samples, manifest = gen_dataset(args.seed, args.n, spec, ratios=args.ratios)
    write_dataset(args.out, samples, manifest)
    split = manifest["split"]
    print(json.dumps({"out": str(args.out), "n": args.n, **{k: len(v) for k, v in split.items()}}))
    return 0


def _load_config(path) -> ModelConfig:
    return ModelConfig() if path is None else ModelConfig.load(path)


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.checkpoint_every is not None:
        config.train.checkpoint_every = args.checkpoint_every
    data = load_dataset(args.data, args.split)
    if not data:
        raise CliError(f"{args.data}: split {args.split!r} is empty")

    def save(state):
        state.model.save(args.out, state.meta())

    try:
        state = train(config, data, args.steps, args.seed, on_checkpoint=save)
    except TrainingDiverged as exc:
        save(exc.last_good)
        return _fail("TrainingDiverged", f"{exc}; last good checkpoint (step {exc.last_good.step}) saved to {args.out}", EXIT_DIVERGED)
    save(state)
    last = state.history[-1] if state.history else None
    print(json.dumps({"out": str(args.out), "steps": state.step, "final_loss": last[1] if last else None}))
    return 0


def _eval_report(data, ckpt, split, threshold, pred_dir=None):
    model, _ = Model.load(ckpt)
    threshold = model.config.threshold if threshold is None else threshold
    dataset = load_dataset(data, split)
    if not dataset:
        raise CliError(f"{data}: split {split!r} is empty")
    result = evaluate(model, dataset, threshold, pred_dir)
    return result, threshold


def cmd_eval(args) -> int:
    result, threshold = _eval_report(args.data, args.ckpt, args.split, args.threshold, args.pred_dir)
    report = result.as_json(data=str(args.data), ckpt=str(args.ckpt), split=args.split, threshold=threshold)
    _write_json(args.report, report)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "tp", "fp", "fn", "tn"])
            for sid, cm in result.per_image:
                w.writerow([sid, cm.tp, cm.fp, cm.fn, cm.tn])
    print(json.dumps({k: report[k] for k in ("precision", "recall", "f1", "iou", "kappa", "oa")}))
    return 0


def cmd_infer(args) -> int:
    model, _ = Model.load(args.ckpt)
    pred = infer(model, args.t1, args.t2, args.out, threshold=args.threshold, prob_path=args.prob, debug_dir=args.debug_maps)
    print(json.dumps({"out": str(args.out), "changed_pixels": int(pred.mask.sum())}))
    return 0


def cmd_gradcheck(args) -> int:
    names = args.op or list(checks.CHECKS)
    seeds = [args.seed] if args.seed is not None else range(args.seeds)
    reports = checks.run(names, seeds)
    for r in reports.values():
        print(r.line())
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_plot(args) -> int:
    report = json.loads(Path(args.report).read_text())
    missing = [k for k in ("data", "ckpt", "split", "threshold") if k not in report]
    if missing:
        raise CliError(f"{args.report}: report lacks {missing}")
    model, _ = Model.load(report["ckpt"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for s in load_dataset(report["data"], report["split"]):
        pred = predict(model, s.t1, s.t2, report["threshold"])
        write_pnm(out / f"{s.id}_overlay.pgm", overlay(pred.mask, s.mask))
        written += 1
    print(json.dumps({"out": str(out), "overlays": written}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="changealign", description="Bi-temporal change detection with feature alignment.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic misaligned dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n", type=int, default=80)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--warp", choices=WARP_KINDS, default="translation")
    s.add_argument("--max-disp", type=float, default=2.0, help="max displacement in pixels")
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--noise-std", type=float, default=0.02)
    s.add_argument("--objects", type=int, default=3, help="change objects per scene")
    s.add_argument("--ratios", type=int, nargs=3, default=(8, 1, 1), metavar=("TRAIN", "VAL", "TEST"))
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--config", type=Path, help="JSON model config; defaults apply when omitted")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--checkpoint-every", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="micro-averaged metrics on a split")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--threshold", type=float)
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--csv", type=Path, help="per-image confusion counts")
    e.add_argument("--pred-dir", type=Path, help="write predicted masks here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a change mask for one image pair")
    i.add_argument("--t1", type=Path, required=True)
    i.add_argument("--t2", type=Path, required=True)
    i.add_argument("--ckpt", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--threshold", type=float)
    i.add_argument("--prob", type=Path, help="also write the probability map")
    i.add_argument("--debug-maps", type=Path, help="directory for gate and DSSIM maps")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--op", action="append", choices=sorted(checks.CHECKS))
    g.add_argument("--seed", type=int, help="single seed instead of 0..seeds-1")
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="prediction/ground-truth overlays for an eval report")
    pl.add_argument("--report", type=Path, required=True)
    pl.add_argument("--out", type=Path, required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        return _fail(type(exc).__name__, str(message), EXIT_BAD_INPUT)


if __name__ == "__main__":
    sys.exit(main())
