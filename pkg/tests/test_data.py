import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from distillvol import data as D
from distillvol.losses import labels_to_regions


def write_nifti(path, zyx: np.ndarray, endian="<", slope=0.0, inter=0.0):
    """Minimal NIfTI-1 single file writer for float32 or uint8 volumes."""
    code = {np.dtype(np.float32): 16, np.dtype(np.uint8): 2}[zyx.dtype]
    header = bytearray(352)
    struct.pack_into(endian + "i", header, 0, 348)
    struct.pack_into(endian + "8h", header, 40, 3, *zyx.shape[::-1], 1, 1, 1, 1)
    struct.pack_into(endian + "h", header, 70, code)
    struct.pack_into(endian + "h", header, 72, zyx.dtype.itemsize * 8)
    struct.pack_into(endian + "f", header, 108, 352.0)
    struct.pack_into(endian + "2f", header, 112, slope, inter)
    header[344:348] = b"n+1\0"
    data = zyx.transpose(2, 1, 0).astype(zyx.dtype.newbyteorder(endian)).tobytes(order="F")
    path.write_bytes(bytes(header) + data)


# -- volumes and scans ----------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.uint8, np.int16, np.float64])
def test_volume_round_trip(tmp_path, dtype, rng):
    arr = (rng.standard_normal((3, 4, 5)) * 10).astype(dtype)
    D.save_volume(tmp_path / "v.dvv", arr)
    back = D.load_volume(tmp_path / "v.dvv")
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


def test_scan_round_trip(tmp_path, small_case):
    D.save_scan(small_case, tmp_path)
    back = D.load_scan(tmp_path / small_case.case_id)
    assert back.provenance == "manual" and back.grade == "HGG"
    np.testing.assert_array_equal(back.image, small_case.image)
    np.testing.assert_array_equal(back.labels, small_case.labels)


def test_missing_flair_named(tmp_path, small_case):
    case_dir = D.save_scan(small_case, tmp_path)
    (case_dir / "flair.dvv").unlink()
    with pytest.raises(FileNotFoundError, match="modality FLAIR not found"):
        D.load_scan(case_dir)


def test_extent_mismatch(tmp_path, small_case):
    case_dir = D.save_scan(small_case, tmp_path)
    D.save_volume(case_dir / "t2.dvv", np.zeros((4, 4, 4), np.float32))
    with pytest.raises(ValueError, match="T2"):
        D.load_scan(case_dir)


# -- normalization ------------------------------------------------------------------


def test_normalize_hand_example():
    v = np.zeros((2, 2, 2), np.float32)
    v[0, 0, 0], v[1, 1, 1] = 2.0, 4.0
    out = D.normalize(v)
    assert out[0, 0, 0] == pytest.approx(-1.0) and out[1, 1, 1] == pytest.approx(1.0)
    assert np.count_nonzero(out) == 2


def test_normalize_constant_and_empty():
    v = np.zeros((3, 3, 3), np.float32)
    np.testing.assert_array_equal(D.normalize(v), v)
    v[1] = 7.0
    assert np.all(D.normalize(v) == 0.0)


@given(
    hnp.arrays(np.float32, (4, 5, 6), elements=st.floats(-50, 50, width=32)),
    hnp.arrays(np.bool_, (4, 5, 6)),
)
def test_normalize_properties(values, mask):
    v = np.where(mask, values, 0.0).astype(np.float32)
    out = D.normalize(v)
    bg = v == 0
    assert np.all(out[bg] == 0.0)
    fg = out[~bg].astype(np.float64)
    if fg.size > 1 and v[~bg].std() > 1e-3:
        assert abs(fg.mean()) < 1e-4 and abs(fg.var() - 1) < 1e-3
        np.testing.assert_allclose(D.normalize(out), out, atol=1e-4)


# -- resampling ---------------------------------------------------------------------


def test_resample_identity_and_constants(rng):
    v = rng.standard_normal((2, 4, 5, 6)).astype(np.float32)
    np.testing.assert_array_equal(D.resample(v, (4, 5, 6)), v)
    c = np.full((3, 4, 4), 2.5, np.float32)
    np.testing.assert_allclose(D.resample(c, (7, 9, 2)), 2.5, rtol=1e-6)


def test_resample_nearest_keeps_labels(small_case):
    out = D.resample(small_case.labels, (24, 20, 10), "nearest")
    assert set(np.unique(out)) <= {0, 1, 2, 4}


# -- cropping -------------------------------------------------------------------------


def test_crop_single_voxel_full_patch(rng):
    fg = np.zeros((8, 8, 8), bool)
    fg[3, 4, 5] = True
    assert D.crop_offset(fg, (8, 8, 8), rng) == (0, 0, 0)


def test_crop_requires_foreground(rng):
    with pytest.raises(ValueError, match="no foreground available"):
        D.crop_offset(np.zeros((8, 8, 8), bool), (4, 4, 4), rng)


@given(st.integers(0, 2**32 - 1))
def test_crop_always_hits_foreground(seed):
    rng = np.random.default_rng(seed)
    fg = np.zeros((20, 20, 20), bool)
    fg[tuple(rng.integers(0, 20, 3))] = True
    off = D.crop_offset(fg, (4, 4, 4), rng)
    assert D.crop(fg, off, (4, 4, 4)).any()


def test_random_crop_foreground_full_extent(small_case, rng):
    out = D.random_crop_foreground(small_case, small_case.extents, rng)
    np.testing.assert_array_equal(out.image, small_case.image)


# -- augmentation -------------------------------------------------------------------------


def test_identity_augmentation(small_case, rng):
    out = D.augment(small_case, D.AugmentParams.identity(), rng)
    np.testing.assert_allclose(out.image, small_case.image, atol=1e-5)
    np.testing.assert_array_equal(out.labels, small_case.labels)


def test_mirror_twice_is_identity(small_case):
    draw = D.AugmentDraw(1.0, 0.0, ("x",), (0.0,) * 4, (1.0,) * 4)
    once = D.augment_arrays(small_case.image, small_case.labels, draw)
    twice = D.augment_arrays(once[0], once[1], draw)
    np.testing.assert_array_equal(twice[0], small_case.image)
    np.testing.assert_array_equal(twice[1], small_case.labels)


def test_augmentation_deterministic_and_label_safe(small_case):
    a = D.augment(small_case, D.AugmentParams(), np.random.default_rng(5))
    b = D.augment(small_case, D.AugmentParams(), np.random.default_rng(5))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert set(np.unique(a.labels)) <= {0, 1, 2, 4}
    # background stays background for every modality
    assert np.all(a.image[:, a.image[0] == 0] == 0)


def test_rotation_is_about_z():
    r = D.rotation_matrix(90)
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(r @ [0, 0, 1], [0, 0, 1], atol=1e-12)
    with pytest.raises(ValueError, match="X and Y"):
        D.AugmentParams(mirror_axes=("z",))


# -- synthetic cases ----------------------------------------------------------------------


def test_synthetic_is_deterministic():
    a, b = D.generate_synthetic_case(3), D.generate_synthetic_case(3)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert D.generate_synthetic_case(3, labeled=False).labels is None


def test_synthetic_nesting_over_100_cases():
    for seed in range(100):
        scan = D.generate_synthetic_case(seed, (16, 16, 16))
        wt, tc, et = labels_to_regions(scan.labels).astype(bool)
        assert np.all(et <= tc) and np.all(tc <= wt)
        assert wt.any()
        assert np.all(scan.image[:, scan.labels > 0] > 0)


# -- NIfTI import ---------------------------------------------------------------------------


@pytest.mark.parametrize("endian", ["<", ">"])
def test_read_nifti(tmp_path, endian, rng):
    zyx = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_nifti(tmp_path / "a.nii", zyx, endian)
    np.testing.assert_array_equal(D.read_nifti(tmp_path / "a.nii"), zyx)


def test_read_nifti_scaling(tmp_path):
    zyx = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    write_nifti(tmp_path / "a.nii", zyx, slope=2.0, inter=1.0)
    np.testing.assert_allclose(D.read_nifti(tmp_path / "a.nii"), 2 * zyx + 1)


def test_read_gzipped_nifti(tmp_path, rng):
    zyx = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_nifti(tmp_path / "a.nii", zyx)
    (tmp_path / "a.nii.gz").write_bytes(gzip.compress((tmp_path / "a.nii").read_bytes()))
    np.testing.assert_array_equal(D.read_nifti(tmp_path / "a.nii.gz"), zyx)


def test_import_nifti_case(tmp_path, small_case):
    src = tmp_path / "src" / "BraTS_001"
    src.mkdir(parents=True)
    for m, suffix in [("t1", "_t1.nii"), ("t1gd", "_t1ce.nii"), ("t2", "_t2.nii"), ("flair", "_flair.nii")]:
        write_nifti(src / f"BraTS_001{suffix}", small_case.volume(m))
    write_nifti(src / "BraTS_001_seg.nii", small_case.labels)
    seg = src / "BraTS_001_seg.nii"
    (src / "BraTS_001_seg.nii.gz").write_bytes(gzip.compress(seg.read_bytes()))
    seg.unlink()
    scan = D.import_nifti_case(src, tmp_path / "out")
    back = D.load_scan(tmp_path / "out" / "BraTS_001")
    np.testing.assert_array_equal(back.image, small_case.image)
    np.testing.assert_array_equal(back.labels, small_case.labels)
    assert scan.provenance == "manual"
