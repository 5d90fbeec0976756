"""Experiment configuration: one TOML file with dataset/model/train/eval sections."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import data as D
from .nn import ARCHITECTURES, NetConfig, default_config
from .optim import LrSchedule
from .train import PAPER_PROFILES, TrainConfig


class ConfigError(ValueError):
    pass


def _line_of(text: str, section: Optional[str], key: str) -> Optional[int]:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[+([^\]]+)\]+", stripped)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return lineno
    return None


@dataclass
class EvalSplit:
    cases: Optional[list[str]] = None
    ratio: Optional[float] = None
    overlap: float = 0.5


@dataclass
class RunConfig:
    path: Path
    text: str
    seed: int
    out: Path
    dataset: dict[str, Path]
    arch: str
    net: NetConfig
    train: TrainConfig
    eval: EvalSplit
    members: list[Path] = field(default_factory=list)
    input_extent: Optional[tuple[int, int, int]] = None
    import_names: dict[str, str] = field(default_factory=dict)

    def error(self, section: Optional[str], key: str, message: str) -> ConfigError:
        line = _line_of(self.text, section, key)
        where = f"{self.path}:{line}" if line else str(self.path)
        name = f"{section}.{key}" if section else key
        return ConfigError(f"{where}: {name}: {message}")

    def require_path(self, key: str, must_exist: bool = True) -> Path:
        """A dataset path by key; ConfigError names the key when unusable."""
        path = self.dataset.get(key)
        if path is None:
            raise self.error("dataset", key, "missing required path")
        if must_exist and not path.exists():
            raise self.error("dataset", key, f"path {path} does not exist")
        return path

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


def _get(table: dict, key: str, kind, default, where) -> Any:
    if key not in table:
        return default
    value = table[key]
    ok = isinstance(value, kind) and not (kind in (int, float) and isinstance(value, bool))
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value, ok = float(value), True
    if not ok:
        raise where(key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _extent(value, where, key) -> Optional[tuple[int, int, int]]:
    if value is None:
        return None
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value] * 3
    if not (isinstance(value, list) and len(value) == 3 and all(isinstance(v, int) and v > 0 for v in value)):
        raise where(key, "expected three positive integers")
    return tuple(value)


def load_config(path: str | Path, seed: Optional[int] = None, out: Optional[str | Path] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.parent

    def err(section):
        def make(key, message):
            line = _line_of(text, section, key)
            where = f"{path}:{line}" if line else str(path)
            return ConfigError(f"{where}: {section + '.' if section else ''}{key}: {message}")

        return make

    known = {"seed", "out", "dataset", "model", "train", "augment", "eval", "ensemble", "import"}
    for key in raw:
        if key not in known:
            raise err(None)(key, "unknown key or section")

    run_seed = seed if seed is not None else _get(raw, "seed", int, 0, err(None))
    out_dir = Path(out) if out is not None else base / _get(raw, "out", str, "runs/out", err(None))

    ds = raw.get("dataset", {})
    dataset = {}
    for key in ("root", "unlabeled", "pseudo"):
        value = _get(ds, key, str, None, err("dataset"))
        if value is not None:
            dataset[key] = base / value

    model = raw.get("model", {})
    w = err("model")
    arch = _get(model, "arch", str, "unet", w)
    if arch not in ARCHITECTURES:
        raise w("arch", f"unknown architecture {arch!r}; expected one of {list(ARCHITECTURES)}")
    overrides = {}
    for key, kind in (("levels", int), ("groups", int), ("stages", int), ("slope", float)):
        if key in model:
            overrides[key] = _get(model, key, kind, None, w)
    try:
        net = default_config(arch, _get(model, "base_channels", int, 16, w), **overrides)
    except ValueError as exc:
        raise w("arch", str(exc)) from None

    tr = raw.get("train", {})
    w = err("train")
    profile = _get(tr, "profile", str, None, w)
    if profile not in (None, "paper"):
        raise w("profile", "only 'paper' is a known profile")
    basis = PAPER_PROFILES[arch] if profile == "paper" else None
    try:
        schedule_kind = _get(tr, "schedule", str, basis.schedule.kind if basis else "step_drop", w)
        lr = _get(tr, "lr", float, basis.schedule.initial if basis else 1e-3, w)
        if schedule_kind == "step_drop":
            schedule = LrSchedule(
                "step_drop",
                lr,
                drop_iter=_get(tr, "drop_iter", int, basis.schedule.drop_iter if basis else 120_000, w),
                factor=_get(tr, "drop_factor", float, 0.1, w),
            )
        elif schedule_kind == "exp_epoch":
            schedule = LrSchedule("exp_epoch", lr, rate=_get(tr, "decay_rate", float, 0.99, w))
        else:
            schedule = LrSchedule(schedule_kind, lr)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise w("schedule", str(exc)) from None

    aug_table = raw.get("augment", {})
    wa = err("augment")
    augment = None
    if _get(tr, "augment", bool, True, w):
        try:
            augment = D.AugmentParams(
                scale_range=tuple(_get(aug_table, "scale_range", list, [0.9, 1.1], wa)),
                rotation_deg=_get(aug_table, "rotation_deg", float, 15.0, wa),
                mirror_axes=tuple(_get(aug_table, "mirror_axes", list, ["x", "y"], wa)),
                mirror_prob=_get(aug_table, "mirror_prob", float, 0.5, wa),
                intensity_shift=_get(aug_table, "intensity_shift", float, 0.1, wa),
                contrast_range=tuple(_get(aug_table, "contrast_range", list, [0.9, 1.1], wa)),
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise wa("mirror_axes", str(exc)) from None

    iterations = _get(tr, "iterations", int, None, w)
    epochs = _get(tr, "epochs", int, None, w)
    if basis is not None and iterations is None and epochs is None:
        iterations, epochs = basis.iterations, basis.epochs
    if iterations is None and epochs is None:
        raise w("iterations", "set iterations or epochs")
    try:
        train_cfg = TrainConfig(
            arch=arch,
            patch=_extent(_get(tr, "patch", (list, int), list(basis.patch) if basis else [32, 32, 32], w), w, "patch"),
            batch_size=_get(tr, "batch_size", int, basis.batch_size if basis else 2, w),
            schedule=schedule,
            iterations=iterations,
            epochs=epochs,
            optimizer=_get(tr, "optimizer", str, basis.optimizer if basis else "adam", w),
            momentum=_get(tr, "momentum", float, 0.9, w),
            seed=run_seed,
            augment=augment,
            resample_to=_extent(_get(tr, "resample_to", (list, int), list(basis.resample_to) if basis and basis.resample_to else None, w), w, "resample_to"),
            hard_labels=_get(tr, "hard_labels", bool, False, w),
            checkpoint_every=_get(tr, "checkpoint_every", int, 0, w),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise w("iterations" if "length" in str(exc) or "exactly one" in str(exc) else "patch", str(exc)) from None
    bad = [e for e in train_cfg.patch if e % (2 ** (net.levels - 1 + (net.stages - 1 if arch == "cascaded_unet" else 0)))]
    if bad:
        raise w("patch", f"extents {train_cfg.patch} not divisible as {arch} with {net.levels} levels requires")

    input_extent = _extent(model.get("input_extent"), err("model"), "input_extent")
    if input_extent is None and arch == "cascaded_unet":
        input_extent = train_cfg.resample_to

    ev = raw.get("eval", {})
    w = err("eval")
    cases = _get(ev, "cases", list, None, w)
    ratio = _get(ev, "ratio", float, None, w)
    if cases is not None and ratio is not None:
        raise w("ratio", "give either cases or ratio, not both")
    if ratio is not None and not 0.0 <= ratio < 1.0:
        raise w("ratio", "must lie in [0, 1)")
    split = EvalSplit(cases, ratio, _get(ev, "overlap", float, 0.5, w))

    members = [base / m for m in _get(raw.get("ensemble", {}), "members", list, [], err("ensemble"))]
    names = dict(raw.get("import", {}).get("names", {}))

    return RunConfig(
        path=path,
        text=text,
        seed=run_seed,
        out=out_dir,
        dataset=dataset,
        arch=arch,
        net=net,
        train=train_cfg,
        eval=split,
        members=members,
        input_extent=input_extent,
        import_names=names,
    )


def _hash_key(case_id: str) -> str:
    return hashlib.sha256(case_id.encode("utf-8")).hexdigest()


def stratified_split(scans: Sequence[D.MultiModalScan], ratio: float) -> set[str]:
    """Evaluation ids: within each grade stratum, the ``ratio`` share of
    cases with the smallest case-id hash."""
    strata: dict[str, list[str]] = {}
    for s in scans:
        strata.setdefault(s.grade, []).append(s.case_id)
    chosen: set[str] = set()
    for ids in strata.values():
        k = int(round(ratio * len(ids)))
        chosen.update(sorted(ids, key=_hash_key)[:k])
    return chosen


def eval_ids(cfg: RunConfig, scans: Sequence[D.MultiModalScan]) -> set[str]:
    if cfg.eval.cases is not None:
        known = {s.case_id for s in scans}
        missing = sorted(set(cfg.eval.cases) - known)
        if missing:
            raise cfg.error("eval", "cases", f"unknown case ids {missing}")
        return set(cfg.eval.cases)
    if cfg.eval.ratio:
        return stratified_split(scans, cfg.eval.ratio)
    return set()
