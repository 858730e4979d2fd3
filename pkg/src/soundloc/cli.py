"""``soundloc`` command line: synth, baseline, train-toy, localize, eval, stats.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 contract/config. Failures print one JSON
line to stderr. Every run appends a provenance record to
``provenance.jsonl`` beside its primary output unless ``--provenance`` says
otherwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .baselines import BaselineSpec, baseline_heatmap
from .data import load_manifest, read_heatmap, write_heatmap
from .errors import SoundlocError
from .losses import LossConfig, TrainConfig, train_toy
from .localizers import run_localizer
from .metrics import EvalConfig, evaluate, results_rows, write_results_csv
from .stats import write_stats
from .synth import SyntheticSceneSpec, synth

EXIT_USAGE, EXIT_IO, EXIT_CONTRACT = 2, 3, 4

log = logging.getLogger("soundloc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_USAGE, "usage", message)


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": message}) + "\n")
    raise SystemExit(code)


def _manifest(path: str, **kw):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return load_manifest(p, **kw), p.resolve().parent


def cmd_synth(args) -> dict:
    spec = SyntheticSceneSpec(
        kind=args.kind, n=args.n, seed=args.seed, image_size=args.image_size,
        area_range=tuple(args.area_range),
    )
    manifest = synth(spec, args.out)
    return {"manifest": str(manifest)}


def cmd_baseline(args) -> dict:
    records, _ = _manifest(args.manifest)
    spec = BaselineSpec(args.kind, args.area_frac, square=args.square)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_heatmap(baseline_heatmap(spec, rec.annotation.width, rec.annotation.height), out / f"{rec.frame_id}.hmp")
    return {"frames": len(records)}


def cmd_train(args) -> dict:
    records, base = _manifest(args.manifest)
    cfg = TrainConfig(
        loss=args.loss, epochs=args.epochs, seed=args.seed, lr=args.lr, arch=args.arch,
        loss_cfg=LossConfig(temperature=args.temperature, batch_size=args.batch_size),
    )
    log_path = args.log or str(args.out) + ".log.csv"
    history = train_toy(records, args.out, cfg, base_dir=base, log_path=log_path)
    return {"losses": history}


def cmd_localize(args) -> dict:
    records, base = _manifest(args.manifest)
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    written = run_localizer(args.method, args.checkpoint, records, args.out, base_dir=base)
    return {"frames": len(written)}


def _dataset_name(records) -> str:
    return "+".join(sorted({r.dataset_id for r in records}))


def cmd_eval(args) -> dict:
    records, _ = _manifest(args.manifest)
    cfg = EvalConfig(
        bin_threshold=args.bin_threshold, ciou_threshold=args.ciou_threshold,
        min_agree=args.min_agree, auc_mode=args.auc_mode, workers=args.workers,
    )
    preds_dir = Path(args.preds)
    preds = {}
    for rec in records:
        path = preds_dir / f"{rec.frame_id}.hmp"
        if not path.is_file():
            raise FileNotFoundError(f"missing prediction for frame {rec.frame_id}: {path}")
        preds[rec.frame_id] = read_heatmap(path)
    result = evaluate(preds, records, cfg)
    model = args.model or preds_dir.resolve().name
    write_results_csv(args.out, results_rows(_dataset_name(records), model, result, cfg))
    return {"ciou_at_tau": result.ciou_at_tau, "auc": result.auc, "per_frame_ciou": result.per_frame_ciou}


def cmd_stats(args) -> dict:
    records, _ = _manifest(args.manifest)
    written = write_stats(
        records, args.out_dir, pred_dir=args.preds, bin_threshold=args.bin_threshold,
        per_box=args.per_box, plots=not args.no_plots,
    )
    return {"files": [p.name for p in written]}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soundloc", description="Visual sound source localization toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--provenance", help="provenance log path (JSON lines)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=["quadrants", "centered"], required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--area-range", type=float, nargs=2, default=[0.2, 0.6], metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth, primary="out")

    p = sub.add_parser("baseline", help="write naive baseline heatmaps")
    p.add_argument("--kind", choices=["center", "quadrants"], required=True)
    p.add_argument("--area-frac", type=float, default=None)
    p.add_argument("--square", action="store_true", help="square center box instead of frame aspect")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline, primary="out")

    p = sub.add_parser("train-toy", help="contrastively train a toy model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--loss", choices=["infonce", "subpatch"], default="infonce")
    p.add_argument("--arch", choices=["conv", "vit"], default="conv")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train, primary="out_file")

    p = sub.add_parser("localize", help="write heatmaps from a toy checkpoint")
    p.add_argument("--method", choices=["cossim", "gradcam", "tmm"], required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_localize, primary="out")

    p = sub.add_parser("eval", help="score heatmaps against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--bin-threshold", type=float, default=0.5)
    p.add_argument("--ciou-threshold", type=float, default=0.5)
    p.add_argument("--min-agree", type=int, default=None)
    p.add_argument("--auc-mode", choices=["success", "binarization"], default="success")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--model", help="model name for the results table (default: preds dir name)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval, primary="out_file")

    p = sub.add_parser("stats", help="box and prediction distribution statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preds")
    p.add_argument("--bin-threshold", type=float, default=0.5)
    p.add_argument("--per-box", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_stats, primary="out_dir")
    return parser


def _provenance_path(args) -> Path:
    if args.provenance:
        return Path(args.provenance)
    if args.primary == "out_dir":
        return Path(args.out_dir) / "provenance.jsonl"
    if args.primary == "out_file":
        return Path(args.out).resolve().parent / "provenance.jsonl"
    return Path(args.out) / "provenance.jsonl"


def _config(args) -> dict:
    skip = {"func", "primary", "provenance", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    config = _config(args)
    try:
        outputs = args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        _fail(EXIT_IO, "io", str(exc))
    except SoundlocError as exc:
        _fail(exc.exit_code if exc.exit_code in (EXIT_IO, EXIT_CONTRACT) else EXIT_CONTRACT, exc.kind, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, "io", str(exc))
    record = {
        "command": args.command,
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "seed": config.get("seed"),
        "version": __version__,
        "outputs": outputs,
    }
    path = _provenance_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
