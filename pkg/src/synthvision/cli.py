"""``synthvision`` command line.

Exit codes: 0 success, 1 internal error, 2 configuration error, 3 data error,
4 dataset validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import data as D
from . import metrics, pipeline, vit
from .errors import ConfigError, DataError, SynthVisionError

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_VALIDATION = 0, 1, 2, 3, 4

log = logging.getLogger("synthvision")


def _staged(sub, name: str, help_text: str):
    p = sub.add_parser(name, help=help_text, description=help_text)
    p.add_argument("config", help="run configuration JSON file")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--out-dir", help="write artifacts here instead of <output root>/<hash>-<timestamp>")
    p.add_argument("--preset", help="override the model preset")
    p.add_argument("--fresh", action="store_true", help="start a new run directory even if one exists")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthvision",
                                     description="Synthetic-image augmentation pipeline for a ViT skin-lesion "
                                                 "classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    _staged(sub, "synth-train", "train the base denoiser and fine-tune it on the guide sets")
    _staged(sub, "synth-generate", "sample candidate images for every guide set")
    _staged(sub, "synth-select", "score candidates and write the training dataset manifest")
    _staged(sub, "train", "train the ViT classifier on the dataset manifest")
    ev = _staged(sub, "evaluate", "evaluate a classifier checkpoint and write reports")
    ev.add_argument("--checkpoint", help="checkpoint to evaluate (default: the run's best checkpoint)")
    _staged(sub, "run", "run every stage from synth-train to evaluate")

    dv = sub.add_parser("dataset-validate", help="check a manifest against its composition policy")
    dv.add_argument("manifest")
    dv.add_argument("--policy", help="policy JSON file to use instead of the manifest's own")
    dv.add_argument("--lenient", action="store_true", help="warn about unknown fields instead of failing")

    rp = sub.add_parser("report", help="print a stored JSON classification report as a table")
    rp.add_argument("path")
    rp.add_argument("--decimals", type=int)

    pa = sub.add_parser("param-audit", help="per-layer parameter counts for a model preset")
    pa.add_argument("preset")
    pa.add_argument("--format", choices=("text", "csv"), default="text")
    pa.add_argument("--num-classes", type=int, help="override the preset's class count")

    mt = sub.add_parser("make-toy", help="write the procedural 3-class image family and a run config")
    mt.add_argument("out_dir")
    mt.add_argument("--seed", type=int, default=0)
    mt.add_argument("--guide-size", type=int, default=15)
    mt.add_argument("--train", type=int, default=100, help="real training images per non-guide class")
    mt.add_argument("--validation", type=int, default=15)
    mt.add_argument("--test", type=int, default=30)
    return parser


def _print(text: str):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _cmd_stage(args) -> int:
    cfg = pipeline.load_run_config(args.config, seed=args.seed, preset=args.preset)
    run = pipeline.run_directory(cfg, args.out_dir, args.fresh)
    stages = pipeline.STAGES if args.command == "run" else (args.command,)
    for stage in stages:
        log.info("stage %s in %s", stage, run)
        if stage == "synth-train":
            res = pipeline.synth_train(cfg, run)
            _print(f"denoiser: {res['finetuned']} ({res['steps']} logged steps)")
        elif stage == "synth-generate":
            res = pipeline.synth_generate(cfg, run)
            _print(f"candidates: {res['count']} -> {res['manifest']}")
        elif stage == "synth-select":
            res = pipeline.synth_select(cfg, run)
            _print(f"dataset manifest: {res['manifest']} ({res['kept']} synthetic records kept)")
            if res["validation"] is not None and not res["validation"].passed:
                print(res["validation"].format(), file=sys.stderr, end="")
        elif stage == "train":
            res = pipeline.train_classifier(cfg, run)
            tl = res["log"]
            _print(f"classifier: {res['best']} (best epoch {tl.best_epoch}, val_loss {tl.best_val_loss}, "
                   f"stopped by {tl.terminal_reason})")
        elif stage == "evaluate":
            ev = pipeline.evaluate_classifier(cfg, run, getattr(args, "checkpoint", None))
            _print(ev.report.format_text())
    _print(f"run directory: {run}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    manifest = D.load_manifest(args.manifest, strict=not args.lenient)
    policy = None
    if args.policy:
        try:
            policy = D.CompositionPolicy.from_dict(json.loads(Path(args.policy).read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise ConfigError(f"policy file not found: {args.policy}") from exc
    if policy is None and manifest.policy is None:
        raise ConfigError("manifest has no policy block and no --policy was given")
    report = D.validate_manifest(manifest, policy)
    _print(report.format())
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _cmd_report(args) -> int:
    try:
        obj = json.loads(Path(args.path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"report not found: {args.path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    rep = metrics.ClassificationReport.from_dict(obj)
    sys.stdout.write(rep.format_text(args.decimals))
    return EXIT_OK


def _cmd_audit(args) -> int:
    overrides = {} if args.num_classes is None else {"num_classes": args.num_classes}
    config = vit.get_preset(args.preset, **overrides)
    sys.stdout.write(vit.format_audit(vit.audit_params(config), args.format))
    return EXIT_OK


def _cmd_make_toy(args) -> int:
    from . import toy

    out = Path(args.out_dir)
    paths = toy.write_toy_dataset(out, args.seed, args.guide_size, args.train, args.validation, args.test)
    config = toy.toy_run_config(seed=args.seed, guide_size=args.guide_size)
    (out / "config.json").write_text(json.dumps(config, indent=1) + "\n", encoding="utf-8")
    _print(f"wrote {paths['real_manifest']}, {paths['guides']} and {out / 'config.json'}")
    return EXIT_OK


_COMMANDS = {"dataset-validate": _cmd_validate, "report": _cmd_report, "param-audit": _cmd_audit,
             "make-toy": _cmd_make_toy}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s",
                        stream=sys.stderr, force=True)
    handler = _COMMANDS.get(args.command, _cmd_stage)
    try:
        return handler(args)
    except SynthVisionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
