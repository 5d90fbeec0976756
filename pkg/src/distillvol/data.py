"""Volume I/O, preprocessing, augmentation and synthetic cases.

Spatial arrays are (D, H, W) = (Z, Y, X). A scan holds the four modalities
stacked as a (4, D, H, W) float32 array in the order T1, T1Gd, T2, FLAIR.
"""

from __future__ import annotations

import gzip
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .losses import validate_labels

logger = logging.getLogger(__name__)

MODALITIES = ("t1", "t1gd", "t2", "flair")
MODALITY_NAMES = {"t1": "T1", "t1gd": "T1Gd", "t2": "T2", "flair": "FLAIR"}
PROVENANCES = ("manual", "ensemble", "none")

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# DVV1 volume container

VOLUME_MAGIC = b"DVV1"
_DTYPE_CODES = {1: np.float32, 2: np.uint8, 3: np.int16, 4: np.int32, 5: np.float64}
_CODE_OF = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def save_volume(path: PathLike, array: np.ndarray) -> None:
    """magic, u8 dtype code, u8 rank, u64 extents, little-endian buffer."""
    arr = np.asarray(array)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported volume dtype {arr.dtype}")
    header = VOLUME_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    Path(path).write_bytes(header + le.tobytes())


def load_volume(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a DVV1 volume")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    offset = 6 + 8 * rank
    if len(buf) != offset + count * dtype.itemsize:
        raise ValueError(f"{path}: buffer length does not match extents {shape}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# scans


@dataclass
class MultiModalScan:
    case_id: str
    image: np.ndarray  # (4, D, H, W)
    labels: Optional[np.ndarray] = None  # (D, H, W) in {0,1,2,4}
    provenance: str = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] != len(MODALITIES):
            raise ValueError(f"{self.case_id}: image must be (4,D,H,W), got {self.image.shape}")
        if self.labels is not None and self.labels.shape != self.image.shape[1:]:
            raise ValueError(
                f"{self.case_id}: label extents {self.labels.shape} differ from image extents {self.image.shape[1:]}"
            )
        if self.provenance not in PROVENANCES:
            raise ValueError(f"{self.case_id}: unknown provenance {self.provenance!r}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.image.shape[1:])

    @property
    def grade(self) -> str:
        return self.meta.get("grade", "")

    def volume(self, modality: str) -> np.ndarray:
        return self.image[MODALITIES.index(modality)]


def save_scan(scan: MultiModalScan, root: PathLike) -> Path:
    case_dir = Path(root) / scan.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(MODALITIES):
        save_volume(case_dir / f"{m}.dvv", np.asarray(scan.image[i], dtype=np.float32))
    if scan.labels is not None:
        save_volume(case_dir / "seg.dvv", np.asarray(scan.labels, dtype=np.uint8))
    meta = {**scan.meta, "case_id": scan.case_id, "provenance": scan.provenance}
    (case_dir / "case.meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return case_dir


def load_scan(directory: PathLike) -> MultiModalScan:
    case_dir = Path(directory)
    vols = []
    for m in MODALITIES:
        path = case_dir / f"{m}.dvv"
        if not path.exists():
            raise FileNotFoundError(f"{case_dir}: modality {MODALITY_NAMES[m]} not found")
        vols.append(load_volume(path))
    for m, v in zip(MODALITIES, vols):
        if v.shape != vols[0].shape:
            raise ValueError(
                f"{case_dir}: modality {MODALITY_NAMES[m]} has extents {v.shape}, expected {vols[0].shape}"
            )
    labels = None
    seg = case_dir / "seg.dvv"
    if seg.exists():
        labels = load_volume(seg)
        if labels.shape != vols[0].shape:
            raise ValueError(f"{case_dir}: segmentation extents {labels.shape} differ from {vols[0].shape}")
        validate_labels(labels)
    meta_path = case_dir / "case.meta"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    provenance = meta.pop("provenance", "manual" if labels is not None else "none")
    case_id = meta.pop("case_id", case_dir.name)
    return MultiModalScan(case_id, np.stack(vols).astype(np.float32), labels, provenance, meta)


def list_cases(root: PathLike) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "t1.dvv").exists())


def load_dataset(root: PathLike) -> list[MultiModalScan]:
    return [load_scan(p) for p in list_cases(root)]


# ---------------------------------------------------------------------------
# preprocessing


def normalize(volume: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the non-zero voxels of one modality.

    Zero (background) voxels are left untouched. A constant foreground maps
    to zero; an all-zero volume is returned unchanged.
    """
    out = np.array(volume, dtype=np.float32, copy=True)
    fg = volume != 0
    if not fg.any():
        return out
    vals = volume[fg].astype(np.float64)
    mean = vals.mean()
    std = vals.std()
    if std < 1e-12:
        out[fg] = 0.0
    else:
        out[fg] = ((vals - mean) / std).astype(np.float32)
    return out


def preprocess(scan: MultiModalScan) -> np.ndarray:
    """Per-modality foreground normalization of the whole image."""
    return np.stack([normalize(v) for v in scan.image])


def _linear_axis(a: np.ndarray, axis: int, size: int) -> np.ndarray:
    n = a.shape[axis]
    if n == size:
        return a
    # align_corners=False source coordinates, clamped at the edges
    src = (np.arange(size) + 0.5) * (n / size) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def _nearest_axis(a: np.ndarray, axis: int, size: int) -> np.ndarray:
    n = a.shape[axis]
    if n == size:
        return a
    idx = np.minimum(np.floor((np.arange(size) + 0.5) * (n / size)).astype(np.int64), n - 1)
    return np.take(a, idx, axis=axis)


def resample(volume: np.ndarray, target: Sequence[int], mode: str = "trilinear") -> np.ndarray:
    """Resize the trailing three axes to ``target``.

    ``trilinear`` for intensities and probabilities, ``nearest`` for labels.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target extents must be three positive ints, got {target}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")
    if tuple(volume.shape[-3:]) == target:
        return volume.copy()
    out = volume if mode == "nearest" else volume.astype(np.float64)
    step = _nearest_axis if mode == "nearest" else _linear_axis
    for i, size in enumerate(target):
        out = step(out, volume.ndim - 3 + i, size)
    return out.astype(volume.dtype, copy=False)


# ---------------------------------------------------------------------------
# patch sampling

CROP_TRIES = 100


def crop_offset(fg: np.ndarray, patch: Sequence[int], rng: np.random.Generator) -> tuple[int, int, int]:
    """Offset of a patch containing at least one foreground voxel.

    Rejection-samples uniform offsets; after CROP_TRIES misses the patch is
    centered (then clamped) on a uniformly drawn foreground voxel.
    """
    ext = fg.shape
    patch = tuple(int(p) for p in patch)
    if any(p > e for p, e in zip(patch, ext)):
        raise ValueError(f"patch {patch} exceeds extents {ext}")
    if not fg.any():
        raise ValueError("no foreground available")
    hi = [e - p + 1 for e, p in zip(ext, patch)]
    for _ in range(CROP_TRIES):
        off = tuple(int(rng.integers(h)) for h in hi)
        if fg[tuple(slice(o, o + p) for o, p in zip(off, patch))].any():
            return off
    idx = np.flatnonzero(fg)
    centre = np.unravel_index(idx[int(rng.integers(idx.size))], ext)
    return tuple(int(min(max(c - p // 2, 0), e - p)) for c, p, e in zip(centre, patch, ext))


def crop(array: np.ndarray, offset: Sequence[int], patch: Sequence[int]) -> np.ndarray:
    window = tuple(slice(o, o + p) for o, p in zip(offset, patch))
    return array[(Ellipsis,) + window]


def random_crop_foreground(scan: MultiModalScan, patch: Sequence[int], rng: np.random.Generator) -> MultiModalScan:
    if scan.labels is None:
        raise ValueError(f"{scan.case_id}: random_crop_foreground needs a label map")
    off = crop_offset(scan.labels != 0, patch, rng)
    return replace(scan, image=crop(scan.image, off, patch).copy(), labels=crop(scan.labels, off, patch).copy())


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_deg: float = 15.0  # about Z only
    mirror_axes: tuple[str, ...] = ("x", "y")
    mirror_prob: float = 0.5
    intensity_shift: float = 0.1  # fraction of the foreground std
    contrast_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        values = [*self.scale_range, self.rotation_deg, self.mirror_prob, self.intensity_shift, *self.contrast_range]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("augmentation ranges must be finite")
        bad = set(self.mirror_axes) - {"x", "y"}
        if bad:
            raise ValueError(f"mirroring is limited to X and Y, got {sorted(bad)}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls((1.0, 1.0), 0.0, (), 0.0, 0.0, (1.0, 1.0))


def rotation_matrix(angle_deg: float) -> np.ndarray:
    """3x3 rotation in (x, y, z) coordinates about the Z axis."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class AugmentDraw:
    scale: float
    angle: float
    mirror: tuple[str, ...]
    shifts: tuple[float, ...]
    contrasts: tuple[float, ...]


def draw_augmentation(params: AugmentParams, channels: int, rng: np.random.Generator) -> AugmentDraw:
    scale = float(rng.uniform(*params.scale_range))
    angle = float(rng.uniform(-params.rotation_deg, params.rotation_deg))
    mirror = tuple(ax for ax in params.mirror_axes if rng.random() < params.mirror_prob)
    shifts = tuple(float(rng.uniform(-params.intensity_shift, params.intensity_shift)) for _ in range(channels))
    contrasts = tuple(float(rng.uniform(*params.contrast_range)) for _ in range(channels))
    return AugmentDraw(scale, angle, mirror, shifts, contrasts)


def _spatial(array: np.ndarray, draw: AugmentDraw, order: int) -> np.ndarray:
    """Apply scale + Z rotation + mirroring to the trailing (D,H,W) axes."""
    out = array
    if draw.scale != 1.0 or draw.angle != 0.0:
        # maps output (z, y, x) index coordinates to input coordinates
        r = rotation_matrix(draw.angle)
        rot_zyx = np.eye(3)
        rot_zyx[1:, 1:] = r[:2, :2][::-1, ::-1]
        matrix = rot_zyx.T / draw.scale
        centre = (np.array(array.shape[-3:]) - 1) / 2.0
        offset = centre - matrix @ centre
        flat = array.reshape((-1,) + array.shape[-3:])
        out = np.stack(
            [ndimage.affine_transform(v, matrix, offset, order=order, mode="nearest") for v in flat]
        ).reshape(array.shape)
    for ax in draw.mirror:
        out = np.flip(out, axis=-1 if ax == "x" else -2)
    return np.ascontiguousarray(out)


def augment_arrays(
    image: np.ndarray,
    target: Optional[np.ndarray],
    draw: AugmentDraw,
    target_order: int = 0,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply one drawn augmentation to an image (C,D,H,W) and its target.

    The spatial part is shared by every channel and the target; intensity
    jitter is per channel and only touches voxels that were non-zero before
    the spatial transform.
    """
    fg = _spatial((image != 0).astype(np.uint8), draw, order=0).astype(bool)
    out = _spatial(image, draw, order=1).astype(image.dtype, copy=True)
    for c in range(out.shape[0]):
        mask = fg[c]
        if not mask.any():
            continue
        std = float(out[c][mask].std())
        out[c][mask] = out[c][mask] * draw.contrasts[c] + draw.shifts[c] * std
    tgt = None if target is None else _spatial(target, draw, order=target_order).astype(target.dtype, copy=False)
    return out, tgt


def augment(scan: MultiModalScan, params: AugmentParams, rng: np.random.Generator) -> MultiModalScan:
    draw = draw_augmentation(params, scan.image.shape[0], rng)
    image, labels = augment_arrays(scan.image, scan.labels, draw, target_order=0)
    return replace(scan, image=image, labels=labels)


# ---------------------------------------------------------------------------
# synthetic cases

# tissue intensity per modality for (healthy, edema=2, core=1, enhancing=4)
_PROFILES = {
    "t1": (0.60, 0.50, 0.35, 0.55),
    "t1gd": (0.60, 0.55, 0.40, 1.25),
    "t2": (0.50, 0.95, 1.05, 0.70),
    "flair": (0.50, 1.15, 0.80, 0.85),
}


def generate_synthetic_case(
    seed: int,
    extents: Sequence[int] = (32, 32, 32),
    case_id: Optional[str] = None,
    grade: str = "HGG",
    labeled: bool = True,
) -> MultiModalScan:
    """Deterministic brain-like volume with 1-3 nested ellipsoidal tumors.

    Each tumor is edema (2) around a core (1) around an enhancing centre (4).
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 16:
        raise ValueError(f"synthetic extents must be three values >= 16, got {extents}")
    rng = np.random.default_rng(seed)
    ext = np.array(extents, dtype=np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extents], indexing="ij"))
    centre = (ext - 1) / 2.0

    def inside(c, radii):
        d = ((grid - c.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)) ** 2
        return d.sum(axis=0) <= 1.0

    brain = inside(centre + rng.uniform(-0.03, 0.03, 3) * ext, ext * rng.uniform(0.40, 0.46, 3))
    labels = np.zeros(extents, dtype=np.uint8)
    layers = {2: np.zeros(extents, bool), 1: np.zeros(extents, bool), 4: np.zeros(extents, bool)}
    for _ in range(int(rng.integers(1, 4))):
        c = centre + rng.uniform(-0.15, 0.15, 3) * ext
        r_out = ext * rng.uniform(0.14, 0.22, 3)
        r_core = r_out * rng.uniform(0.55, 0.75, 3)
        r_enh = np.maximum(r_core * rng.uniform(0.5, 0.7, 3), 1.0)
        layers[2] |= inside(c, r_out)
        layers[1] |= inside(c, r_core)
        layers[4] |= inside(c, r_enh)
    for value in (2, 1, 4):
        labels[layers[value] & brain] = value

    # smooth multiplicative bias field plus voxel noise
    phase = rng.uniform(0, 2 * np.pi, 3)
    bias = 1.0 + 0.08 * np.sin(2 * np.pi * grid[0] / ext[0] + phase[0]) * np.cos(
        2 * np.pi * grid[1] / ext[1] + phase[1]
    ) + 0.05 * np.sin(2 * np.pi * grid[2] / ext[2] + phase[2])
    tissue = np.select([labels == 2, labels == 1, labels == 4], [1, 2, 3], 0)
    image = np.zeros((4,) + extents, dtype=np.float32)
    for i, m in enumerate(MODALITIES):
        base = np.asarray(_PROFILES[m])[tissue] * bias
        vol = base + 0.04 * rng.standard_normal(extents)
        vol = np.where(brain, np.maximum(vol, 1e-3), 0.0)
        image[i] = (100.0 * vol).astype(np.float32)
    case_id = case_id if case_id is not None else f"synth_{seed:05d}"
    return MultiModalScan(
        case_id,
        image,
        labels if labeled else None,
        "manual" if labeled else "none",
        {"grade": grade, "seed": int(seed)},
    )


# ---------------------------------------------------------------------------
# NIfTI import (uncompressed single-file NIfTI-1 only)

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}

DEFAULT_NAME_MAP = {
    "t1": "_t1.nii",
    "t1gd": "_t1ce.nii",
    "t2": "_t2.nii",
    "flair": "_flair.nii",
    "seg": "_seg.nii",
}


def read_nifti(path: PathLike) -> np.ndarray:
    """Read a single-file NIfTI-1 volume (.nii or .nii.gz); returns a (Z, Y, X) array."""
    path = Path(path)
    buf = path.read_bytes()
    if path.suffix == ".gz":
        buf = gzip.decompress(buf)
    if len(buf) < 352:
        raise ValueError(f"{path}: too short for a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", buf, 0)[0] == 348:
            break
    else:
        raise ValueError(f"{path}: not a NIfTI-1 file")
    if buf[344:347] != b"n+1":
        raise ValueError(f"{path}: only single-file NIfTI (magic n+1) is supported")
    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    vox_offset = int(struct.unpack_from(endian + "f", buf, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", buf, 112)
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype {datatype}")
    ndim = dim[0]
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    if ndim == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise ValueError(f"{path}: expected a 3-D volume, got dims {shape}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    data = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=vox_offset)
    arr = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr.astype(np.float64) * (slope if slope != 0.0 else 1.0) + inter
    return np.ascontiguousarray(arr.transpose(2, 1, 0))


def import_nifti_case(
    source: PathLike,
    out_root: PathLike,
    case_id: Optional[str] = None,
    name_map: Optional[Mapping[str, str]] = None,
    meta: Optional[dict] = None,
) -> MultiModalScan:
    """Convert one directory of NIfTI files into the native case layout.

    ``name_map`` maps t1/t1gd/t2/flair/seg to a filename suffix.
    """
    source = Path(source)
    names = {**DEFAULT_NAME_MAP, **(name_map or {})}
    files = sorted(p for p in source.iterdir() if p.is_file())

    def find(key):
        hits = [p for p in files if p.name.endswith(names[key]) or p.name.endswith(names[key] + ".gz")]
        if len(hits) > 1:
            raise ValueError(f"{source}: several files match {names[key]!r}")
        return hits[0] if hits else None

    vols = []
    for m in MODALITIES:
        p = find(m)
        if p is None:
            raise FileNotFoundError(f"{source}: modality {MODALITY_NAMES[m]} not found (suffix {names[m]!r})")
        vols.append(read_nifti(p).astype(np.float32))
    seg_path = find("seg")
    labels = read_nifti(seg_path).astype(np.uint8) if seg_path is not None else None
    scan = MultiModalScan(
        case_id or source.name,
        np.stack(vols),
        labels,
        "manual" if labels is not None else "none",
        dict(meta or {}),
    )
    if labels is not None:
        validate_labels(labels)
    save_scan(scan, out_root)
    return scan
