"""``distillvol`` command line.

Exit codes: 0 success, 1 any other failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig, eval_ids, load_config
from .distill import distill, ensemble_predict, load_pseudo_store, pseudo_label
from .gradcheck import TOLERANCE, run_suite
from .losses import format_table
from .nn import build_network, load_checkpoint, save_checkpoint
from .report import evaluate_cases, write_report
from .train import NonFiniteLossError, TrainingCase, train, write_loss_log

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("distillvol")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _attach_run_log(out: Path) -> logging.Handler:
    # timestamps live only here, so every other output stays byte-stable
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("distillvol").addHandler(handler)
    logging.getLogger("distillvol").setLevel(logging.INFO)
    return handler


def _config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    return load_config(args.config, seed=args.seed, out=args.out)


def _split_scans(cfg: RunConfig):
    scans = D.load_dataset(cfg.require_path("root"))
    held_out = eval_ids(cfg, scans)
    return [s for s in scans if s.case_id not in held_out], [s for s in scans if s.case_id in held_out]


def _finish_training(net, result, out: Path) -> None:
    save_checkpoint(net, out / "checkpoint.dvw")
    write_loss_log(out / "loss_log.csv", result.history)
    log.info("wrote %s (%d iterations, final loss %.4f)", out / "checkpoint.dvw", len(result.history), result.history[-1].total)


def cmd_train(args) -> int:
    cfg = _config(args)
    train_scans, _ = _split_scans(cfg)
    handler = _attach_run_log(cfg.out)
    try:
        net = build_network(cfg.arch, cfg.net, seed=cfg.seed)
        net.input_extent = cfg.input_extent
        dataset = [TrainingCase.from_scan(s) for s in train_scans]
        log.info("training %s on %d cases", cfg.arch, len(dataset))
        result = train(net, dataset, cfg.train, checkpoint_dir=cfg.out, log_every=10)
        _finish_training(net, result, cfg.out)
    finally:
        logging.getLogger("distillvol").removeHandler(handler)
        handler.close()
    return EXIT_OK


def _members(cfg: Optional[RunConfig], paths: Sequence[str]):
    paths = [Path(p) for p in paths] or (cfg.members if cfg else [])
    if not paths:
        raise ConfigError("no ensemble members: pass --model or set ensemble.members")
    arch = cfg.arch if cfg else None
    net_cfg = cfg.net if cfg else None
    return paths, [load_checkpoint(p, arch, net_cfg) for p in paths]


def cmd_ensemble_label(args) -> int:
    cfg = _config(args) if args.config else None
    paths, models = _members(cfg, args.model)
    if args.unlabeled:
        unlabeled = Path(args.unlabeled)
    elif cfg is not None:
        unlabeled = cfg.require_path("unlabeled")
    else:
        raise ConfigError("ensemble-label needs --unlabeled or dataset.unlabeled")
    if args.out:
        store = Path(args.out)
    elif cfg is not None:
        store = cfg.require_path("pseudo", must_exist=False)
    else:
        raise ConfigError("ensemble-label needs --out or dataset.pseudo")
    store.mkdir(parents=True, exist_ok=True)
    scans = D.load_dataset(unlabeled)
    overlap = cfg.eval.overlap if cfg else 0.5
    cases = pseudo_label(models, scans, store, overlap)
    manifest = {
        "cases": [c.case_id for c in cases],
        "members": [{"path": p.name, "arch": m.arch, "sha256": _sha256(p)} for p, m in zip(paths, models)],
    }
    _write_json(store / "manifest.json", manifest)
    print(f"pseudo-labeled {len(cases)} cases into {store}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _config(args)
    if cfg.arch != "res_unet":
        raise cfg.error("model", "arch", f"the student must be res_unet, got {cfg.arch!r}")
    train_scans, held = _split_scans(cfg)
    pseudo = load_pseudo_store(cfg.require_path("pseudo"), cfg.require_path("unlabeled"))
    handler = _attach_run_log(cfg.out)
    try:
        log.info("distilling: %d manual + %d ensemble-labeled cases", len(train_scans), len(pseudo))
        net, result = distill(train_scans, pseudo, cfg.net, cfg.train, {s.case_id for s in held}, cfg.out)
        _finish_training(net, result, cfg.out)
    finally:
        logging.getLogger("distillvol").removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args) if args.config else None
    _, models = _members(cfg, args.model)
    if args.split:
        scans = D.load_dataset(args.split)
    elif cfg is not None:
        _, scans = _split_scans(cfg)
        if not scans:
            raise cfg.error("eval", "ratio", "evaluation split is empty")
    else:
        raise ConfigError("evaluate needs --split or a config with an eval split")
    overlap = cfg.eval.overlap if cfg else 0.5
    method = args.name or ("Ensemble" if len(models) > 1 else models[0].arch)
    report = evaluate_cases(lambda im: ensemble_predict(models, im, overlap), scans, method)
    out = Path(args.out) if args.out else (cfg.out / "eval" if cfg else Path("eval"))
    write_report(report, out)
    print(format_table([(method, {r: report.mean(r) for r in ("ET", "WT", "TC")})]), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<24} max rel err {r.error:.3e}  ({r.seconds:.2f}s)")
    if failed:
        names = ", ".join(f"{r.name} ({r.error:.3e})" for r in failed)
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {names}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks below {TOLERANCE:g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out or "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    extent = tuple(args.extent) if len(args.extent) == 3 else (args.extent[0],) * 3
    ids = []
    for i in range(args.count):
        case_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        case_id = f"{args.prefix}_{i:04d}"
        grade = "HGG" if i % 2 == 0 else "LGG"
        scan = D.generate_synthetic_case(case_seed, extent, case_id=case_id, grade=grade, labeled=not args.unlabeled)
        D.save_scan(scan, out)
        ids.append(case_id)
    _write_json(out / "manifest.json", {"seed": seed, "count": args.count, "extent": list(extent), "cases": ids})
    print(f"wrote {args.count} cases to {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    cfg = _config(args) if args.config else None
    names = dict(D.DEFAULT_NAME_MAP)
    if cfg is not None:
        names.update(cfg.import_names)
    source = Path(args.source)
    if not source.is_dir():
        raise FileNotFoundError(f"import source {source} is not a directory")
    out = Path(args.out) if args.out else Path("imported")
    subdirs = sorted(p for p in source.iterdir() if p.is_dir())
    case_dirs = subdirs or [source]
    for case_dir in case_dirs:
        scan = D.import_nifti_case(case_dir, out, case_dir.name, names)
        print(f"imported {scan.case_id} {scan.extents}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "ensemble-label": cmd_ensemble_label,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "import": cmd_import,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")

    parser = argparse.ArgumentParser(prog="distillvol", description="Brain tumor segmentation with ensemble distillation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one network")
    p = sub.add_parser("ensemble-label", parents=[common], help="pseudo-label unlabeled scans with an ensemble")
    p.add_argument("--model", action="append", default=[], help="member checkpoint (repeatable)")
    p.add_argument("--unlabeled", help="directory of unlabeled cases")
    sub.add_parser("distill", parents=[common], help="train the student on manual plus ensemble labels")
    p = sub.add_parser("evaluate", parents=[common], help="Dice report for a model or an ensemble")
    p.add_argument("--model", action="append", default=[], help="checkpoint (repeat for an ensemble)")
    p.add_argument("--split", help="directory of labeled cases to evaluate (default: config eval split)")
    p.add_argument("--name", help="method name in the report")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p = sub.add_parser("synth", parents=[common], help="write synthetic cases")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--extent", type=int, nargs="+", default=[32], help="one or three extents")
    p.add_argument("--prefix", default="synth")
    p.add_argument("--unlabeled", action="store_true", help="omit segmentations")
    p = sub.add_parser("import", parents=[common], help="convert NIfTI cases to the native layout")
    p.add_argument("--source", required=True, help="case directory, or a directory of case directories")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
