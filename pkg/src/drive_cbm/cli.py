"""Command-line entry point.

    drive-cbm generate CONFIG
    drive-cbm train CONFIG --stage {base,drive} [--mask A,BC,DE]
    drive-cbm evaluate CONFIG [--sweep FILE]
    drive-cbm audit CONFIG --thresholds FILE [--spec FILE] [--split test]
    drive-cbm ablate CONFIG

Exit codes: 0 success, 1 audit failed (or training diverged), 2 configuration
error, 3 missing or unreadable prerequisite. ``DRIVE_OUTPUT_DIR`` overrides the
configured output directory.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import model as cbm
from . import serialize, synthdata
from .config import ConfigError, ExperimentConfig, SweepFile, load, validate
from .evaluation import run_sweep
from .losses import mask_label, parse_mask
from .metrics import Thresholds, dependability_report
from .perturbations import PerturbationSpec
from .training import TrainingError, run_ablation, train_base, train_drive

EXIT_OK, EXIT_AUDIT_FAILED, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
FULL_MASK = (True, True, True, True)


class MissingPrerequisite(RuntimeError):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; run `{hint}` first")
    return path


def _load_dataset(out: Path) -> synthdata.SynthDataset:
    path = _need(out / "dataset.drvt", "drive-cbm generate CONFIG")
    try:
        return synthdata.load(path)
    except serialize.FormatError as exc:
        raise MissingPrerequisite(f"{path} is unusable: {exc}") from None


def _load_model(path: Path, hint: str) -> cbm.CbmParams:
    _need(path, hint)
    try:
        return cbm.load_checkpoint(path)[0]
    except serialize.FormatError as exc:
        raise MissingPrerequisite(f"{path} is unusable: {exc}") from None


def drive_checkpoint_name(mask) -> str:
    mask = tuple(mask)
    return "drive.ckpt" if mask == FULL_MASK else f"drive_{mask_label(mask).replace(',', '-')}.ckpt"


# -- commands -------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir()
    ds = synthdata.generate(cfg.data)
    synthdata.save(ds, out / "dataset.drvt")
    summary = {
        "path": str(out / "dataset.drvt"),
        "version": synthdata.VERSION,
        "spec": cfg.data.to_dict(),
        "concept_space_id": ds.concept_space.id,
        "split_sizes": {k: len(v) for k, v in ds.splits.items()},
        "digest": ds.digest(),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir()
    ds = _load_dataset(out)
    if args.stage == "base":
        if args.mask:
            raise ConfigError("--mask only applies to --stage drive", "--mask")
        params, tlog = train_base(ds.train, ds.val, ds.concept_space, cfg.train, cfg.dims)
        cbm.save_checkpoint(out / "base.ckpt", params, seed=cfg.train.seed, stage="base",
                            extra={"dataset": ds.digest()})
        _write_text(out / "base_log.csv", tlog.to_csv())
        print(out / "base.ckpt")
        return EXIT_OK
    try:
        mask = parse_mask(args.mask) if args.mask else FULL_MASK
    except ValueError as exc:
        raise ConfigError(str(exc), "--mask") from None
    base = _load_model(out / "base.ckpt", "drive-cbm train CONFIG --stage base")
    params, tlog = train_drive(base, ds.train, ds.val, ds.concept_space, cfg.train, mask)
    name = drive_checkpoint_name(mask)
    cbm.save_checkpoint(out / name, params, seed=cfg.train.seed, stage="drive",
                        extra={"mask": mask_label(mask), "base": base.digest()})
    _write_text(out / name.replace(".ckpt", "_log.csv"), tlog.to_csv())
    print(out / name)
    return EXIT_OK


def _models(out: Path) -> dict[str, cbm.CbmParams]:
    return {
        "DCG": _load_model(out / "base.ckpt", "drive-cbm train CONFIG --stage base"),
        "DRIVE": _load_model(out / "drive.ckpt", "drive-cbm train CONFIG --stage drive"),
    }


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir()
    sweep = SweepFile.load(args.sweep).specs if args.sweep else list(cfg.sweep)
    ds = _load_dataset(out)
    table = run_sweep(_models(out), ds.concept_space, ds.test, sweep, cfg.topk)
    doc = table.to_dict()
    validate(doc, "result_table")
    _write_text(out / "results.csv", table.to_csv())
    _write_text(out / "results.json", _dump_json(doc))
    sys.stdout.write(table.to_csv())
    return EXIT_OK


def _load_thresholds(path) -> Thresholds:
    try:
        raw = json.loads(Path(path).read_text("utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("thresholds file must hold a JSON object")
        return Thresholds.from_dict(raw)
    except FileNotFoundError:
        raise ConfigError(f"thresholds file {str(path)!r} not found", "--thresholds") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"cannot parse thresholds: {exc}", "--thresholds") from None


def cmd_audit(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir()
    thresholds = _load_thresholds(args.thresholds)
    if args.spec:
        try:
            spec = PerturbationSpec.from_dict(json.loads(Path(args.spec).read_text("utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"spec file {args.spec!r} not found", "--spec") from None
        except (ValueError, TypeError, AttributeError) as exc:
            raise ConfigError(str(exc), "--spec") from None
    else:
        spec = cfg.train.pgd
    ds = _load_dataset(out)
    models = _models(out)
    report = dependability_report(models["DCG"], models["DRIVE"], ds.concept_space, ds.split(args.split), spec,
                                  thresholds, cfg.topk)
    doc = report.to_dict()
    validate(doc, "dependability_report")
    _write_text(out / "audit_report.json", _dump_json(doc))
    sys.stdout.write(_dump_json(doc))
    return EXIT_OK if report.dependable else EXIT_AUDIT_FAILED


ABLATION_COLUMNS = ("A", "BC", "DE", "a_mae", "d_mae", "ad_mae", "top_k")


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir()
    ds = _load_dataset(out)
    base = _load_model(out / "base.ckpt", "drive-cbm train CONFIG --stage base")
    rows = run_ablation(base, ds.train, ds.val, ds.test, ds.concept_space, cfg.train, k=cfg.topk)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        d = r.to_dict()
        w.writerow(["x" if d[c] is True else "" if d[c] is False else
                    ("" if d[c] is None else repr(d[c])) for c in ABLATION_COLUMNS])
    _write_text(out / "ablation.csv", buf.getvalue())
    _write_text(out / "ablation.json", _dump_json([r.to_dict() for r in rows]))
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "audit": cmd_audit,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drive-cbm", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="write the synthetic dataset")
    g.add_argument("config")
    t = sub.add_parser("train", help="train the base model or fine-tune it")
    t.add_argument("config")
    t.add_argument("--stage", choices=("base", "drive"), required=True)
    t.add_argument("--mask", help="regularizer groups for --stage drive, e.g. A,BC (A is always on)")
    e = sub.add_parser("evaluate", help="perturbation sweep over both models")
    e.add_argument("config")
    e.add_argument("--sweep", help="JSON list of perturbation specs (default: the config's sweep)")
    a = sub.add_parser("audit", help="dependability audit of the fine-tuned model")
    a.add_argument("config")
    a.add_argument("--thresholds", required=True, help="JSON object with gamma1..gamma4 (numbers or \"inf\")")
    a.add_argument("--spec", help="JSON perturbation spec (default: the training PGD spec)")
    a.add_argument("--split", choices=("train", "val", "test"), default="test")
    b = sub.add_parser("ablate", help="one fine-tuned model per regularizer group mask")
    b.add_argument("config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_AUDIT_FAILED


if __name__ == "__main__":
    sys.exit(main())

