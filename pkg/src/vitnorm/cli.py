"""Command-line entry point: ``vitnorm <command> [--spec FILE] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .checkpoint import CheckpointError
from .data import DataFormatError
from .model import ConfigError, ModelConfig
from .train import TrainingDiverged

log = logging.getLogger("vitnorm")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--spec", type=Path, help="YAML run spec (model/train/dataset sections)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--dataset", choices=ex.DATASETS, help="override the run spec's dataset")
    p.add_argument("--data-dir", help="directory holding the dataset files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitnorm", description="ViT LayerNorm-placement laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train", help="train one model; writes metrics.csv and checkpoint.ckpt"))

    p = sub.add_parser("eval", help="accuracy of a checkpoint on the run spec's eval split")
    _common(p, out_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)

    for name, helptext in (
        ("sweep-placements", "9 block placements + NormFormer + Sub-LN + DPN stem"),
        ("ablate-stem", "stem normalization ablations relative to DPN"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    _common(sub.add_parser("grad-norms", help="per-layer gradient norms, with and without DPN"))

    p = sub.add_parser("export-scales", help="first stem LN scale as per-channel PGM images + CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every stem/placement variant")
    p.add_argument("--spec", type=Path, help="optional spec whose model section overrides the micro model")
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _spec(args) -> ex.RunSpec:
    return ex.load_spec(args.spec, seed=args.seed, dataset=args.dataset, data_dir=args.data_dir, out=None)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, DataFormatError, CheckpointError, FileNotFoundError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "train":
        spec = _spec(args)
        _, records = ex.run_training(spec, args.out)
        print(f"{spec.name}: {len(records)} rows -> {args.out / 'metrics.csv'}; final eval accuracy {records[-1].eval_accuracy}")
    elif cmd == "eval":
        acc = ex.eval_checkpoint(args.checkpoint, _spec(args), args.out)
        print(f"accuracy {acc!r}")
    elif cmd == "sweep-placements":
        path = ex.sweep_placements(_spec(args), args.out, jobs=args.jobs)
        print(f"wrote {path}")
    elif cmd == "ablate-stem":
        path = ex.ablate_stem(_spec(args), args.out, jobs=args.jobs)
        print(f"wrote {path}")
    elif cmd == "grad-norms":
        res = ex.grad_norms(_spec(args), args.out)
        print(f"stem gradient norm ratio none/dpn: {res.stem_ratio!r}")
        print(f"wrote {res.depth_csv}, {res.series_csv}, {res.summary_csv}")
    elif cmd == "export-scales":
        for path in ex.export_scales(args.checkpoint, args.out):
            print(f"wrote {path}")
    elif cmd == "grad-check":
        base = ex.MICRO_MODEL
        if args.spec is not None:
            overrides = ex.load_spec(args.spec).model.to_dict()
            base = ModelConfig.from_dict(overrides)
        ok, rows = ex.grad_check(base, args.out, seed=args.seed, tolerance=args.tolerance)
        failed = [r for r in rows if not r.passed]
        worst = max(r.rel_error for r in rows)
        print(f"{len(rows)} parameter checks, {len(failed)} failed, worst relative error {worst:.3e}")
        for r in failed:
            print(f"FAIL {r.variant} {r.path} rel_error={r.rel_error:.3e}")
        return 0 if ok else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
