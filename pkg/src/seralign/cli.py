"""Command-line entry point.

Subcommands mirror the pipeline phases; every one takes --config pointing
at a JSON experiment file. SERALIGN_OUT_DIR overrides the configured
output directory and SERALIGN_THREADS caps the BLAS thread pools (set
before numpy loads, hence the deferred imports below). Exit code 0 on
success; failures print a machine-readable JSON error record to stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_override() -> None:
    threads = os.environ.get("SERALIGN_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seralign",
        description="Three-phase frame-aligned speech emotion recognition pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, fold: bool = False) -> None:
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        if fold:
            p.add_argument("--fold", type=int, required=True, help="cross-validation fold index (0-4)")

    common(sub.add_parser("gen-corpus", help="generate (or re-save) the corpus file"))
    common(sub.add_parser("tapt", help="phase 1: masked pretrain + average-pooled fine-tune"), fold=True)
    common(sub.add_parser("cluster", help="phase 2a: tap-layer k-means codebook and pseudo-labels"), fold=True)
    common(sub.add_parser("pretrain", help="phase 2b: continued masked pretraining"), fold=True)
    ft = sub.add_parser("finetune", help="phase 3: pooled supervised fine-tune")
    common(ft, fold=True)
    ft.add_argument("--pooling", choices=("average", "attention"), help="override the configured pooling")
    ev = sub.add_parser("eval", help="aggregate the five folds into a report")
    common(ev)
    ev.add_argument("--pooling", choices=("average", "attention"), help="override the configured pooling")
    common(sub.add_parser("run", help="everything: corpus, all folds, report"))
    common(sub.add_parser("ablation", help="run the layer x clusters x pooling grid"))
    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_override()
    args = build_parser().parse_args(argv)

    from . import pipeline
    from .errors import SeralignError

    try:
        cfg = pipeline.ExperimentConfig.from_file(args.config)
        if args.command == "gen-corpus":
            path = pipeline.phase_gen_corpus(cfg)
            print(f"corpus written to {path}")
        elif args.command == "tapt":
            record = pipeline.phase_tapt(cfg, args.fold)
            print(f"fold {args.fold} tapt UA/WA: {record['ua']:.4f}/{record['wa']:.4f}")
        elif args.command == "cluster":
            record = pipeline.phase_cluster(cfg, args.fold)
            print(f"fold {args.fold} codebook {record['codebook_id'][:12]} inertia {record['inertia']:.4f}")
        elif args.command == "pretrain":
            record = pipeline.phase_pretrain(cfg, args.fold)
            print(
                f"fold {args.fold} masked accuracy {record['masked_accuracy_heldout']:.4f} "
                f"(chance {record['chance_rate']:.4f})"
            )
        elif args.command == "finetune":
            record = pipeline.phase_finetune(cfg, args.fold, args.pooling)
            print(f"fold {args.fold} {record['pooling']} UA/WA: {record['ua']:.4f}/{record['wa']:.4f}")
        elif args.command == "eval":
            summary = pipeline.phase_eval(cfg, args.pooling)
            print(f"mean UA/WA over folds: {summary['ua_mean']:.4f}/{summary['wa_mean']:.4f}")
        elif args.command == "run":
            summary = pipeline.run_all(cfg)
            print(f"mean UA/WA over folds: {summary['ua_mean']:.4f}/{summary['wa_mean']:.4f}")
        elif args.command == "ablation":
            result = pipeline.run_ablation(cfg)
            assert result.report is not None
            print(result.report.text, end="")
    except SeralignError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
