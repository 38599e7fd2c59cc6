import gzip
import struct

import numpy as np
import pytest

from lesionlab.nifti import (
    DimensionOverflowError,
    NotNiftiError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    read_volume,
    write_volume,
)
from lesionlab.volume import VoxelGrid


def sample(dtype):
    rng = np.random.default_rng(0)
    if dtype == np.float32:
        return rng.random((5, 6, 7)).astype(np.float32)
    if dtype == np.int16:
        return rng.integers(-3000, 3000, (5, 6, 7)).astype(np.int16)
    return rng.integers(0, 5, (5, 6, 7)).astype(np.uint8)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip(tmp_path, dtype, suffix):
    affine = np.array([[0.9, 0, 0, -10], [0, 1.1, 0, 5], [0, 0, 2.5, 3], [0, 0, 0, 1]])
    grid = VoxelGrid(sample(dtype), spacing=(0.9, 1.1, 2.5), affine=affine)
    path = tmp_path / f"vol{suffix}"
    write_volume(grid, path)
    back = read_volume(path)
    assert back.data.dtype == dtype
    assert back.data.tobytes() == grid.data.tobytes()
    np.testing.assert_allclose(back.spacing, grid.spacing, rtol=1e-6)
    np.testing.assert_allclose(back.affine, affine, rtol=1e-6)


def test_layout_matches_format_by_hand(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    path = tmp_path / "v.nii"
    write_volume(data, path)
    raw = path.read_bytes()
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack("<8h", raw[40:56])[:4] == (3, 2, 3, 4)
    assert struct.unpack("<hh", raw[70:74]) == (4, 16)
    assert struct.unpack("<f", raw[108:112])[0] == 352.0
    # x varies fastest on disk
    payload = np.frombuffer(raw[352:], "<i2")
    assert payload[:3].tolist() == [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]]


def test_gzip_is_reproducible(tmp_path):
    data = sample(np.uint8)
    write_volume(data, tmp_path / "a.nii.gz")
    write_volume(data, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    # detection is by content, not by name
    (tmp_path / "c.nii").write_bytes((tmp_path / "a.nii.gz").read_bytes())
    assert read_volume(tmp_path / "c.nii").data.tobytes() == data.tobytes()


def test_four_d_channels(tmp_path):
    probs = np.random.default_rng(1).random((4, 5, 6, 3)).astype(np.float32)
    write_volume(probs, tmp_path / "p.nii.gz")
    back = read_volume(tmp_path / "p.nii.gz")
    assert back.n_channels == 3
    assert back.data.tobytes() == probs.tobytes()


def test_like_copies_orientation(tmp_path):
    affine = np.array([[-1.0, 0, 0, 90], [0, 1, 0, -126], [0, 0, 1, -72], [0, 0, 0, 1]])
    write_volume(VoxelGrid(sample(np.float32), affine=affine), tmp_path / "ref.nii")
    ref = read_volume(tmp_path / "ref.nii")
    write_volume(sample(np.uint8), tmp_path / "out.nii", like=ref)
    np.testing.assert_allclose(read_volume(tmp_path / "out.nii").affine, affine)


def test_scaling_is_applied(tmp_path):
    path = tmp_path / "s.nii"
    write_volume(np.full((2, 2, 2), 10, np.int16), path)
    raw = bytearray(path.read_bytes())
    raw[112:120] = struct.pack("<ff", 0.5, 1.0)
    path.write_bytes(bytes(raw))
    back = read_volume(path)
    assert back.data.dtype == np.float32 and (back.data == 6.0).all()


def corrupt(tmp_path, edit):
    path = tmp_path / "bad.nii"
    write_volume(np.zeros((3, 3, 3), np.uint8), path)
    raw = bytearray(path.read_bytes())
    edit(raw)
    path.write_bytes(bytes(raw))
    return path


def test_named_errors(tmp_path):
    def truncate(raw):
        del raw[360:]

    def bad_magic(raw):
        raw[344:348] = b"xxxx"

    def bad_type(raw):
        raw[70:74] = struct.pack("<hh", 64, 64)

    def bad_dims(raw):
        raw[40:42] = struct.pack("<h", 9)

    for edit, error in [(truncate, TruncatedPayloadError), (bad_magic, NotNiftiError),
                        (bad_type, UnsupportedDatatypeError), (bad_dims, DimensionOverflowError)]:
        with pytest.raises(error):
            read_volume(corrupt(tmp_path, edit))
    (tmp_path / "junk.nii").write_bytes(b"not an image")
    with pytest.raises(TruncatedPayloadError):
        read_volume(tmp_path / "junk.nii")
    (tmp_path / "junk.nii.gz").write_bytes(gzip.compress(b"\0" * 400)[:20])
    with pytest.raises(TruncatedPayloadError):
        read_volume(tmp_path / "junk.nii.gz")
    with pytest.raises(UnsupportedDatatypeError):
        write_volume(np.zeros((2, 2, 2), np.int64) + 10**6, tmp_path / "big.nii")


def test_failed_write_leaves_no_file(tmp_path):
    with pytest.raises(UnsupportedDatatypeError):
        write_volume(np.zeros((2, 2, 2), complex), tmp_path / "c.nii")
    assert list(tmp_path.iterdir()) == []
