"""Minimal NIfTI-1 I/O for the exchange protocol.

Covers exactly what the protocol moves around: little-endian single-file
NIfTI-1 with uint8/int16/int32/float32 payloads, 3D volumes or 4D channel
stacks, sform affines, optional gzip by suffix.  Written files use a zeroed
gzip mtime so outputs are reproducible byte for byte.
"""

import gzip
import struct

import numpy as np

_FMT = "<i10s18sih1s1s8h3f4h8f3fh1s1s4f2i80s24s2h6f12f16s4s"
_MAGIC = b"n+1\x00"
_VOX_OFFSET = 352
_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

assert struct.calcsize(_FMT) == 348


class NiftiError(RuntimeError):
    pass


def _read_bytes(path):
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, blob):
    if str(path).endswith(".gz"):
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                gz.write(blob)
        return
    with open(path, "wb") as fh:
        fh.write(blob)


def read(path):
    """Returns (data, affine); data is (nx, ny, nz) or (nx, ny, nz, nc)."""
    raw = _read_bytes(path)
    if len(raw) < 352:
        raise NiftiError(f"{path}: truncated header")
    fields = struct.unpack(_FMT, raw[:348])
    if fields[65] != _MAGIC:
        raise NiftiError(f"{path}: bad magic {fields[65]!r}")
    dim = fields[7:15]
    if not 1 <= dim[0] <= 7:
        raise NiftiError(f"{path}: implausible dim[0]={dim[0]} (big-endian files unsupported)")
    shape = [max(1, dim[i + 1]) for i in range(4)]
    if dim[0] <= 3:
        shape[3] = 1
    datatype = fields[19]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype])
    offset = int(round(fields[30]))
    nbytes = int(np.prod(shape)) * dtype.itemsize
    payload = raw[offset : offset + nbytes]
    if len(payload) < nbytes:
        raise NiftiError(f"{path}: payload truncated")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F").astype(np.float64)
    slope = fields[31] if fields[31] != 0.0 else 1.0
    arr = arr * slope + fields[32]
    sform = fields[45]
    if sform >= 1:
        affine = np.eye(4)
        affine[0, :] = fields[52:56]
        affine[1, :] = fields[56:60]
        affine[2, :] = fields[60:64]
    else:
        affine = np.diag([*fields[23:26], 1.0])
    if shape[3] == 1:
        return arr[..., 0], affine
    return arr, affine


def write(data, affine, path, datatype=np.float32):
    """Write a 3D volume or 4D channel stack."""
    data = np.asarray(data)
    if data.ndim == 3:
        dims, channels = data.shape, 1
    elif data.ndim == 4:
        dims, channels = data.shape[:3], data.shape[3]
    else:
        raise NiftiError(f"expected 3D/4D data, got shape {data.shape}")
    dtype = np.dtype(datatype)
    if dtype not in _CODES:
        raise NiftiError(f"cannot write dtype {dtype}")
    affine = np.asarray(affine, dtype=np.float64)
    voxel = np.linalg.norm(affine[:3, :3], axis=0)
    dim = [3 if channels == 1 else 4, *dims, channels, 1, 1, 1]
    pixdim = [1.0, *voxel.tolist(), 0.0, 0.0, 0.0, 0.0]
    header = struct.pack(
        _FMT,
        348, b"", b"", 0, 0, b"\x00", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0, _CODES[dtype], dtype.itemsize * 8, 0,
        *pixdim,
        float(_VOX_OFFSET), 1.0, 0.0,
        0, b"\x00", b"\x02",
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *[float(x) for x in affine[:3, :].ravel()],
        b"", _MAGIC,
    )
    blob = header + b"\x00\x00\x00\x00" + data.astype(dtype).tobytes(order="F")
    _write_bytes(path, blob)
