import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_ldm.data.manifest import DatasetManifest, split_dataset
from adaptive_ldm.data.phantom import LESION, PhantomSpec, generate_phantom
from adaptive_ldm.data.source import DataError, DirectorySource, PhantomSource, directory_manifest, phantom_manifest
from adaptive_ldm.data.volume_io import (
    BadDimensionError,
    BadMagicError,
    ExtentOverflowError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    VolumeFormatError,
    decode_raw,
    encode_raw,
    load_nifti,
    load_raw,
    save_raw,
)


def nifti_bytes(values, shape, datatype=16, fmt="<f4", slope=0.0, inter=0.0, magic=b"n+1\x00", ndim=3):
    """Hand-assembled single-file NIfTI-1 image (header, 4-byte extension gap, payload)."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, ndim, *shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, np.dtype(fmt).itemsize * 8)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, slope, inter)
    hdr[344:348] = magic
    return bytes(hdr) + b"\x00" * 4 + np.asarray(values, dtype=fmt).tobytes()


# -- phantoms ----------------------------------------------------------------------------


def test_identical_lookup_rows_without_noise_give_identical_volumes():
    row = (0.0, 0.7, 0.4, 0.9)
    spec = PhantomSpec(extent=16, modalities=("X", "Y"), lut=(row, row), noise_std=0.0)
    vs = generate_phantom(spec, 3)
    np.testing.assert_array_equal(vs["X"], vs["Y"])


def test_same_seed_bitwise_equal():
    spec = PhantomSpec(extent=16)
    a, b = generate_phantom(spec, 11), generate_phantom(spec, 11)
    for m in spec.modalities:
        assert a[m].tobytes() == b[m].tobytes()
    assert not np.array_equal(a["A"], generate_phantom(spec, 12)["A"])


def test_lesion_contrast_inversion_gives_negative_correlation():
    vs = generate_phantom(PhantomSpec(), 0)
    mask = vs.labels == LESION
    assert mask.sum() > 20
    r = np.corrcoef(vs["A"][mask], vs["B"][mask])[0, 1]
    assert r < 0


def test_lookup_row_count_mismatch_rejected():
    with pytest.raises(ValueError, match="rows"):
        generate_phantom(PhantomSpec(modalities=("A", "B")), 0)


def test_lookup_values_out_of_range_rejected():
    with pytest.raises(ValueError):
        PhantomSpec(modalities=("A", "B"), lut=((0, 0.5, 0.5, 1.5), (0, 0.5, 0.5, 0.5))).validate()


def test_volumes_in_unit_range_and_shared_extent():
    vs = generate_phantom(PhantomSpec(extent=24), 5)
    for v in vs.volumes.values():
        assert v.shape == (24, 24, 24) and v.dtype == np.float32
        assert v.min() == 0.0 and v.max() == 1.0


def test_class_boundaries_align_across_modalities():
    lut = ((0.0, 0.2, 0.5, 0.9), (0.0, 0.9, 0.3, 0.6), (0.1, 0.4, 0.8, 0.0))
    spec = PhantomSpec(extent=16, lut=lut, smoothing=0.0, noise_std=0.0)
    vs = generate_phantom(spec, 9)
    # without smoothing or noise every modality is a pure function of the label field
    for name in spec.modalities:
        v = vs[name]
        for c in range(4):
            vals = np.unique(v[vs.labels == c])
            assert len(vals) <= 1
        assert len(np.unique(v)) == len(np.unique(vs.labels))


# -- raw container -----------------------------------------------------------------------


def test_raw_round_trip_random_volume(tmp_path):
    v = np.random.default_rng(0).standard_normal((8, 8, 8)).astype(np.float32)
    save_raw(v, tmp_path / "v.rvol")
    assert load_raw(tmp_path / "v.rvol").tobytes() == v.tobytes()


@settings(max_examples=30, deadline=None)
@given(shape=st.lists(st.integers(1, 7), min_size=1, max_size=4), seed=st.integers(0, 999))
def test_raw_round_trip_bitwise_any_extent(shape, seed):
    v = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    out = decode_raw(encode_raw(v))
    assert out.shape == v.shape and out.tobytes() == v.tobytes()


def test_raw_layout():
    buf = encode_raw(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"RVOL"
    assert struct.unpack_from("<HBB", buf, 4) == (1, 0, 2)
    assert struct.unpack_from("<2I", buf, 8) == (2, 3)
    assert np.frombuffer(buf[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_raw_bad_magic_names_offset():
    buf = b"XVOL" + encode_raw(np.zeros(3))[4:]
    with pytest.raises(BadMagicError, match="offset 0"):
        decode_raw(buf)


def test_raw_truncated_payload():
    head = b"RVOL" + struct.pack("<HBB", 1, 0, 3) + struct.pack("<3I", 4, 4, 4)
    with pytest.raises(TruncatedPayloadError, match="64"):
        decode_raw(head + np.zeros(63, "<f4").tobytes())


def test_raw_extent_overflow():
    head = b"RVOL" + struct.pack("<HBB", 1, 0, 3) + struct.pack("<3I", 2**20, 2**20, 2**20)
    with pytest.raises(ExtentOverflowError):
        decode_raw(head)


def test_raw_error_cases_are_distinct():
    kinds = {BadMagicError, TruncatedPayloadError, ExtentOverflowError}
    assert len(kinds) == 3 and all(issubclass(k, VolumeFormatError) for k in kinds)


# -- NIfTI -------------------------------------------------------------------------------


def test_nifti_float32_ascending_fixture(tmp_path):
    path = tmp_path / "a.nii"
    # NIfTI lists the first index fastest: value at [i, j, k] is i + 2j + 4k
    path.write_bytes(nifti_bytes(np.arange(8), (2, 2, 2)))
    vol, hdr = load_nifti(path)
    assert vol.min() == 0.0 and vol.max() == 1.0
    for i, j, k in np.ndindex(2, 2, 2):
        assert vol[i, j, k] == pytest.approx((i + 2 * j + 4 * k) / 7, abs=1e-7)
    assert hdr["dim"][1:4] == (2, 2, 2)


def test_nifti_scaling_applied_before_normalization(tmp_path):
    raw = np.array([0, 1, 3, 4, 4, 4, 4, 9], dtype=np.int16)
    path = tmp_path / "s.nii"
    path.write_bytes(nifti_bytes(raw, (2, 2, 2), datatype=4, fmt="<i2", slope=2.0, inter=1.0))
    vol, _ = load_nifti(path)
    scaled = raw * 2.0 + 1.0
    expect = ((scaled - scaled.min()) / (scaled.max() - scaled.min())).reshape((2, 2, 2), order="F")
    np.testing.assert_allclose(vol, expect, atol=1e-7)
    # positive affine scaling is invisible after min-max; a negative slope shows it is applied
    path.write_bytes(nifti_bytes(raw, (2, 2, 2), datatype=4, fmt="<i2", slope=-2.0, inter=1.0))
    np.testing.assert_allclose(load_nifti(path)[0], 1.0 - expect, atol=1e-7)
    assert load_nifti(path)[1]["scl_slope"] == -2.0


def test_nifti_uint8_and_gzip(tmp_path):
    path = tmp_path / "u.nii.gz"
    path.write_bytes(gzip.compress(nifti_bytes(np.array([0, 255, 51, 102, 0, 0, 0, 0]), (2, 2, 2), 2, "<u1")))
    vol, _ = load_nifti(path)
    assert vol[1, 0, 0] == pytest.approx(1.0) and vol[0, 1, 0] == pytest.approx(0.2)


def test_nifti_bad_magic(tmp_path):
    path = tmp_path / "m.nii"
    path.write_bytes(nifti_bytes(np.arange(8), (2, 2, 2), magic=b"abcd"))
    with pytest.raises(BadMagicError):
        load_nifti(path)


def test_nifti_unsupported_datatype(tmp_path):
    path = tmp_path / "d.nii"
    path.write_bytes(nifti_bytes(np.arange(8), (2, 2, 2), datatype=64, fmt="<f8"))
    with pytest.raises(UnsupportedDatatypeError):
        load_nifti(path)


@pytest.mark.parametrize("ndim", [2, 5])
def test_nifti_bad_dimension_count(tmp_path, ndim):
    path = tmp_path / "n.nii"
    path.write_bytes(nifti_bytes(np.arange(8), (2, 2, 2), ndim=ndim))
    with pytest.raises(BadDimensionError):
        load_nifti(path)


def test_nifti_four_dim_header_accepted(tmp_path):
    path = tmp_path / "f.nii"
    path.write_bytes(nifti_bytes(np.arange(8), (2, 2, 2), ndim=4))
    assert load_nifti(path)[0].shape == (2, 2, 2)


# -- manifests and splits ----------------------------------------------------------------


def manifest(n):
    return DatasetManifest([f"s{i}" for i in range(n)], ["A", "B"])


def test_split_ten_subjects():
    m = split_dataset(manifest(10), 0.8, 0)
    assert len(m.train) == 8 and len(m.test) == 2


def test_split_same_seed_same_result():
    assert split_dataset(manifest(20), 0.7, 4).split == split_dataset(manifest(20), 0.7, 4).split


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 60), frac=st.floats(0.05, 0.95), seed=st.integers(0, 999))
def test_split_is_disjoint_and_exhaustive(n, frac, seed):
    m = split_dataset(manifest(n), frac, seed)
    train, test = set(m.train), set(m.test)
    assert not train & test
    assert train | test == set(m.subjects)
    assert train and test


def test_split_rejects_bad_input():
    with pytest.raises(ValueError):
        split_dataset(manifest(1), 0.5, 0)
    with pytest.raises(ValueError):
        split_dataset(manifest(5), 1.0, 0)


def test_manifest_json_round_trip(tmp_path):
    m = phantom_manifest(PhantomSpec(extent=16), 6, 0.5, 1)
    m.save(tmp_path / "m.json")
    assert DatasetManifest.load(tmp_path / "m.json") == m


def test_spec_hash_changes_iff_spec_changes():
    a = phantom_manifest(PhantomSpec(extent=16), 4, 0.5, 0)
    b = phantom_manifest(PhantomSpec(extent=16), 4, 0.5, 0)
    c = phantom_manifest(PhantomSpec(extent=16, noise_std=0.02), 4, 0.5, 0)
    assert a.spec_hash == b.spec_hash != c.spec_hash


def test_unknown_modality_lists_registered():
    with pytest.raises(KeyError, match="A, B"):
        manifest(3).modality_index("Q")


# -- sources ------------------------------------------------------------------------------


def test_phantom_source_matches_generator():
    spec = PhantomSpec(extent=16)
    m = phantom_manifest(spec, 4, 0.5, 0)
    src = PhantomSource(spec, m)
    np.testing.assert_array_equal(src.volumes("sub-0002")["B"], generate_phantom(spec, 2)["B"])
    with pytest.raises(DataError):
        src.volumes("nobody")


def test_directory_source_reads_raw_and_nifti(tmp_path):
    for s in ("p1", "p2"):
        (tmp_path / s).mkdir()
        save_raw(np.full((2, 2, 2), 0.5, np.float32), tmp_path / s / "A.rvol")
        (tmp_path / s / "B.nii").write_bytes(nifti_bytes(np.arange(8), (2, 2, 2)))
    m = directory_manifest(tmp_path, ["A", "B"], 0.5, 0)
    assert sorted(m.subjects) == ["p1", "p2"]
    vols = DirectorySource(tmp_path, m).volumes("p1")
    assert vols["A"][0, 0, 0] == 0.5 and vols["B"].max() == 1.0
    (tmp_path / "p2" / "A.rvol").unlink()
    with pytest.raises(DataError, match="A"):
        DirectorySource(tmp_path, m).volumes("p2")


def test_directory_manifest_missing_root(tmp_path):
    with pytest.raises(DataError):
        directory_manifest(tmp_path / "none", ["A", "B"], 0.5, 0)
