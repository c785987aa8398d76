"""Command-line interface.

Subcommands map onto pipeline stages plus reporting and rate probing:

    unlearn-lab synth    --config cfg.json        # corpus + tokenizer
    unlearn-lab finetune --config cfg.json        # original + retained
    unlearn-lab normal   --config cfg.json        # companion construction
    unlearn-lab unlearn  --config cfg.json --r -0.4
    unlearn-lab eval     --config cfg.json
    unlearn-lab sweep    --config cfg.json        # all stages over sweep_r
    unlearn-lab report   --config cfg.json        # CSV tables + summary
    unlearn-lab probe-r  --config cfg.json        # r* sign profile

Flags override the corresponding config fields. Exit code 0 on success;
failures print the failing stage and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .harness import (
    ExperimentConfig,
    RunManifest,
    StageError,
    export_tables,
    probe_rates,
    run_pipeline,
)
from .normal_data import NormalSet
from .corpus import Corpora
from .tokenizer import Vocabulary

_STAGE_COMMANDS = {
    "synth": ["synth"],
    "finetune": ["synth", "finetune"],
    "normal": ["synth", "normal"],
    "unlearn": ["synth", "finetune", "normal", "unlearn"],
    "eval": ["synth", "finetune", "normal", "unlearn", "eval"],
    "sweep": ["synth", "finetune", "normal", "unlearn", "eval"],
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--method", help="unlearning method id (overrides config)")
    p.add_argument("--r", type=float, help="smoothing rate (overrides config)")
    p.add_argument("--companions", type=int, help="normal samples per forget record")
    p.add_argument("--threshold", type=float, help="similarity threshold")
    p.add_argument("--mode", help="normal-set mode: similarity|endpoint|fallback-only")
    p.add_argument("--template", help="endpoint prompt template id")
    p.add_argument("--epochs", type=int, help="unlearning epochs")
    p.add_argument("--lr", type=float, help="unlearning learning rate")


def _build_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    else:
        if args.out is None:
            raise SystemExit("either --config or --out is required")
        cfg = ExperimentConfig(out_dir=args.out)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.method is not None:
        cfg.method.method = args.method
    if args.r is not None:
        cfg.method.rate = args.r
        cfg.sweep_r = None
    if args.companions is not None:
        cfg.normal.companions = args.companions
    if args.threshold is not None:
        cfg.normal.threshold = args.threshold
    if args.mode is not None:
        cfg.normal.mode = args.mode
    if args.template is not None:
        cfg.normal.template = args.template
    if args.epochs is not None:
        cfg.unlearn.epochs = args.epochs
    if args.lr is not None:
        cfg.unlearn.lr = args.lr
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="unlearn-lab",
        description="desk-scale LLM unlearning laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "finetune", "normal", "unlearn", "eval", "sweep",
                 "report", "probe-r"):
        p = sub.add_parser(name)
        _add_common(p)
    args = parser.parse_args(argv)

    try:
        cfg = _build_config(args)
        if args.command in _STAGE_COMMANDS:
            cfg.stages = _STAGE_COMMANDS[args.command]
            manifest = run_pipeline(cfg)
            if args.command in ("sweep", "eval"):
                export_tables([manifest], Path(cfg.out_dir) / "reports")
            print(f"{args.command}: done -> {cfg.out_dir}")
            return 0
        if args.command == "report":
            manifest = RunManifest.load(cfg.out_dir)
            outputs = export_tables([manifest], Path(cfg.out_dir) / "reports")
            for name, path in sorted(outputs.items()):
                print(f"{name}: {path}")
            return 0
        if args.command == "probe-r":
            out = Path(cfg.out_dir)
            manifest = RunManifest.load(out)
            corpora = Corpora.load(out / "corpus")
            vocab = Vocabulary.load(out / "corpus" / "vocab.json")
            original = Checkpoint.load(out / manifest.checkpoints["original"])
            nset = NormalSet.load(out / "normal" / "normal_set.jsonl")
            profile, rows = probe_rates(
                original, corpora, vocab, nset, cfg.method.slot_count
            )
            path = out / "reports" / "sign_profile.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            profile.save_jsonl(path)
            import json as _json

            rate_path = out / "reports" / "optimal_rates.jsonl"
            with open(rate_path, "w", encoding="utf-8") as f:
                for row in rows:
                    f.write(_json.dumps(row, sort_keys=True) + "\n")
            s = profile.summary()
            print(
                f"instances={s['instances']} positive={s['positive']} "
                f"negative={s['negative']} zero={s['zero']} -> {path}"
            )
            return 0
        raise SystemExit(f"unknown command {args.command!r}")
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
