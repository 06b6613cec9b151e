"""Command line entry point: ``ltn-detect {gen,train,eval,preset}``.

Exit status is 0 on success, 1 for invalid input (bad config, spec, axiom
or data files) and 2 for failures while running.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .autodiff import NonFiniteError
from .data import SyntheticSpec, generate_synthetic, write_dataset
from .detection import format_ontology
from .harness import ExperimentConfig, VARIANTS, evaluate, run_preset, train


def _cmd_gen(args) -> None:
    with open(args.spec, encoding="utf-8") as fh:
        spec = SyntheticSpec.from_text(fh.read())
    ds = generate_synthetic(spec, args.seed)
    write_dataset(args.out, ds)
    with open(args.out + ".classes", "w", encoding="utf-8") as fh:
        fh.write("".join(c + "\n" for c in ds.classes))
    if ds.ontology is not None:
        with open(args.out + ".ontology", "w", encoding="utf-8") as fh:
            fh.write(format_ontology(ds.ontology))
    print(f"wrote {sum(len(im.proposals) for im in ds.images)} proposals "
          f"in {len(ds.images)} images to {args.out}")


def _cmd_train(args) -> None:
    cfg = ExperimentConfig.read(args.config)
    est = train(cfg)
    last = est.history_[-1] if est.history_ else None
    summary = f"final total loss {last.total:.6f}" if last else "no epochs run"
    print(f"wrote {cfg.checkpoint} ({summary})")


def _cmd_eval(args) -> None:
    report = evaluate(args.checkpoint, args.data, args.iou)
    text = report.to_text()
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _cmd_preset(args) -> None:
    cfg = run_preset(args.name, args.scale)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltn-detect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic proposal dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="compute per-class AP and mAP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("preset", help="write the config of a named ablation")
    p.add_argument("--name", required=True, choices=list(VARIANTS))
    p.add_argument("--scale", choices=("full", "desk"), default="full")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preset)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        # bad config, spec, axiom, ontology or data files, or missing inputs
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
