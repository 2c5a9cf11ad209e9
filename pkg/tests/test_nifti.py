import gzip
import os
import struct

import numpy as np
import pytest

from nsf import nifti
from nsf.errors import CorruptError, FormatError, InvalidArgumentError, UnsupportedError
from nsf.volume import IntensityVolume, LabelVolume, make_affine


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
@pytest.mark.parametrize(
    "dtype,maker",
    [
        (np.uint8, lambda rng: rng.integers(0, 255, (4, 5, 6))),
        (np.int16, lambda rng: rng.integers(-3000, 3000, (4, 5, 6))),
        (np.int32, lambda rng: rng.integers(-70000, 70000, (4, 5, 6))),
    ],
)
def test_integer_roundtrip_bit_exact(tmp_path, suffix, dtype, maker):
    rng = np.random.default_rng(0)
    lab = maker(rng)
    if dtype != np.int32:
        lab = np.abs(lab)
    vol = LabelVolume(np.asarray(lab, dtype=np.int64).clip(min=0).astype(np.int32), make_affine((1, 1, 2.5), (3, -2, 1)))
    path = str(tmp_path / f"labels{suffix}")
    nifti.write_volume(vol, path, datatype=dtype)
    back = nifti.read_labels(path)
    assert np.array_equal(back.data, vol.data)
    np.testing.assert_allclose(back.affine, vol.affine, atol=1e-5)


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_float32_roundtrip_within_relative_tolerance(tmp_path, suffix):
    rng = np.random.default_rng(1)
    vol = IntensityVolume.from_spacing(rng.random((6, 5, 4)) * 100 + 1, voxel_size=(0.7, 1.0, 1.3))
    path = str(tmp_path / f"img{suffix}")
    nifti.write_volume(vol, path)
    back = nifti.read_image(path)
    np.testing.assert_allclose(back.data, vol.data, rtol=1e-6)
    np.testing.assert_allclose(back.affine, vol.affine, atol=1e-5)


def test_file_size_arithmetic(tmp_path):
    # 3^3 uint8 cube: 348-byte header + 4-byte extension flag + 27 bytes data
    vol = LabelVolume.from_spacing(np.arange(27, dtype=np.int32).reshape(3, 3, 3) % 5)
    path = str(tmp_path / "cube.nii")
    nifti.write_volume(vol, path, datatype=np.uint8)
    assert os.path.getsize(path) == 348 + 4 + 27


def test_scl_slope_and_inter_applied(tmp_path):
    vol = LabelVolume.from_spacing(np.full((2, 2, 2), 3, dtype=np.int32))
    path = str(tmp_path / "scaled.nii")
    nifti.write_volume(vol, path, datatype=np.int16)
    blob = bytearray(open(path, "rb").read())
    # scl_slope at byte 112, scl_inter at 116
    blob[112:116] = struct.pack("<f", 2.0)
    blob[116:120] = struct.pack("<f", 1.0)
    open(path, "wb").write(bytes(blob))
    back = nifti.read_image(path)
    np.testing.assert_allclose(back.data, 7.0)  # 3*2 + 1


def test_scl_slope_zero_means_one(tmp_path):
    vol = LabelVolume.from_spacing(np.full((2, 2, 2), 5, dtype=np.int32))
    path = str(tmp_path / "noslope.nii")
    nifti.write_volume(vol, path, datatype=np.int16)
    blob = bytearray(open(path, "rb").read())
    blob[112:116] = struct.pack("<f", 0.0)
    open(path, "wb").write(bytes(blob))
    np.testing.assert_allclose(nifti.read_image(path).data, 5.0)


def test_gzip_payload_matches_uncompressed(tmp_path):
    rng = np.random.default_rng(2)
    vol = IntensityVolume.from_spacing(rng.random((5, 5, 5)))
    plain = str(tmp_path / "a.nii")
    nifti.write_volume(vol, plain)
    golden = str(tmp_path / "a.nii.gz")
    with open(plain, "rb") as src, gzip.open(golden, "wb") as dst:
        dst.write(src.read())
    a = nifti.read_image(plain)
    b = nifti.read_image(golden)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.affine, b.affine)


def test_gzip_writes_are_deterministic(tmp_path):
    vol = IntensityVolume.from_spacing(np.arange(8.0).reshape(2, 2, 2))
    p1, p2 = str(tmp_path / "d1.nii.gz"), str(tmp_path / "d2.nii.gz")
    nifti.write_volume(vol, p1)
    nifti.write_volume(vol, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_multi_channel_stack_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    affine = make_affine((1, 1, 1), (-5, 4, 2))
    channels = [IntensityVolume(rng.random((4, 4, 4)), affine) for _ in range(8)]
    path = str(tmp_path / "stack.nii.gz")
    nifti.write_stack(channels, path)
    back = nifti.read_stack(path)
    assert len(back) == 8
    for orig, got in zip(channels, back):
        np.testing.assert_allclose(got.data, orig.data, rtol=1e-6)
    with pytest.raises(InvalidArgumentError):
        nifti.read_image(path)  # 4D must go through read_stack


def test_big_endian_detected_and_swapped(tmp_path):
    vol = LabelVolume.from_spacing(np.arange(8, dtype=np.int32).reshape(2, 2, 2))
    path = str(tmp_path / "le.nii")
    nifti.write_volume(vol, path, datatype=np.int16)
    blob = open(path, "rb").read()
    fmt = nifti._HEADER_FMT
    fields = struct.unpack(fmt, blob[:348])
    swapped = struct.pack(">" + fmt[1:], *fields) + blob[348:352] + np.frombuffer(
        blob[352:], dtype="<i2"
    ).astype(">i2").tobytes()
    be_path = str(tmp_path / "be.nii")
    open(be_path, "wb").write(swapped)
    back = nifti.read_labels(be_path)
    assert np.array_equal(back.data, vol.data)


def test_qform_fallback_when_sform_zero(tmp_path):
    vol = IntensityVolume.from_spacing(np.ones((2, 2, 2)), voxel_size=(2.0, 3.0, 4.0))
    path = str(tmp_path / "qform.nii")
    nifti.write_volume(vol, path)
    blob = bytearray(open(path, "rb").read())
    blob[252:254] = struct.pack("<h", 1)  # qform_code = 1
    blob[254:256] = struct.pack("<h", 0)  # sform_code = 0
    # identity quaternion, offset (9, 8, 7)
    blob[256:280] = struct.pack("<6f", 0.0, 0.0, 0.0, 9.0, 8.0, 7.0)
    open(path, "wb").write(bytes(blob))
    back = nifti.read_image(path)
    np.testing.assert_allclose(back.voxel_size, (2.0, 3.0, 4.0), atol=1e-5)
    np.testing.assert_allclose(back.affine[:3, 3], (9.0, 8.0, 7.0), atol=1e-5)


# ---------------------------------------------------------------------------
# corrupt / unsupported fixtures
# ---------------------------------------------------------------------------


def _valid_blob():
    vol = LabelVolume.from_spacing(np.zeros((3, 3, 3), dtype=np.int32))
    tmp = "/tmp/_nsf_fixture.nii"
    nifti.write_volume(vol, tmp, datatype=np.uint8)
    blob = open(tmp, "rb").read()
    os.unlink(tmp)
    return bytearray(blob)


def test_bad_magic_rejected(tmp_path):
    blob = _valid_blob()
    blob[344:348] = b"xyz\x00"
    path = str(tmp_path / "badmagic.nii")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(FormatError):
        nifti.read_volume(path)


def test_unsupported_datatype_rejected(tmp_path):
    blob = _valid_blob()
    blob[70:72] = struct.pack("<h", 64)  # float64: recognized but unsupported
    path = str(tmp_path / "float64.nii")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(UnsupportedError):
        nifti.read_volume(path)


def test_truncated_payload_rejected(tmp_path):
    blob = _valid_blob()
    path = str(tmp_path / "truncated.nii")
    open(path, "wb").write(bytes(blob[:-10]))
    with pytest.raises(CorruptError):
        nifti.read_volume(path)


def test_declared_length_exceeding_payload_rejected(tmp_path):
    blob = _valid_blob()
    blob[42:44] = struct.pack("<h", 50)  # dim[1] inflated beyond the payload
    path = str(tmp_path / "overdeclared.nii")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CorruptError):
        nifti.read_volume(path)


def test_truncated_header_rejected(tmp_path):
    path = str(tmp_path / "stub.nii")
    open(path, "wb").write(b"\x5c\x01\x00\x00 short")
    with pytest.raises(CorruptError):
        nifti.read_volume(path)


def test_implausible_dim0_rejected(tmp_path):
    blob = _valid_blob()
    blob[40:42] = struct.pack("<h", 9)  # dim[0] outside [1, 7] in either endianness
    path = str(tmp_path / "dim0.nii")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(FormatError):
        nifti.read_volume(path)


# ---------------------------------------------------------------------------
# write preconditions
# ---------------------------------------------------------------------------


def test_label_float_write_refused(tmp_path):
    vol = LabelVolume.from_spacing(np.zeros((2, 2, 2), dtype=np.int32))
    with pytest.raises(InvalidArgumentError):
        nifti.write_volume(vol, str(tmp_path / "x.nii"), datatype=np.float32)


def test_range_overflow_refused(tmp_path):
    vol = LabelVolume.from_spacing(np.full((2, 2, 2), 300, dtype=np.int32))
    with pytest.raises(InvalidArgumentError):
        nifti.write_volume(vol, str(tmp_path / "x.nii"), datatype=np.uint8)


def test_nan_never_reaches_disk(tmp_path):
    # the volume type itself refuses NaN, so writing can never see one
    with pytest.raises(InvalidArgumentError):
        IntensityVolume.from_spacing(np.full((2, 2, 2), np.nan))
    vol = IntensityVolume.from_spacing(np.ones((2, 2, 2)))
    object.__setattr__(vol, "data", np.full((2, 2, 2), np.nan))  # simulate corruption
    with pytest.raises(InvalidArgumentError):
        nifti.write_volume(vol, str(tmp_path / "nan.nii"))
