"""Single-file NIfTI-1 reader/writer for the toolkit's interchange subset.

Supported: uint8 / int16 / int32 / float32 payloads, 3D volumes and 4D
channel stacks, sform affines (qform read fallback), scl_slope/scl_inter
scaling, and gzip containers selected by the ``.gz`` suffix.  Files are
written little-endian with sform only; big-endian files are detected via the
dim[0] heuristic and byte-swapped on read.  Gzip members are written with a
zeroed mtime so identical volumes produce identical bytes.
"""

import gzip
import os
import struct

import numpy as np

from .errors import CorruptError, FormatError, InvalidArgumentError, UnsupportedError
from .volume import IntensityVolume, LabelVolume

_HEADER_FMT = "<i10s18sih1s1s8h3f4h8f3fh1s1s4f2i80s24s2h6f12f16s4s"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)
assert _HEADER_SIZE == 348

_MAGIC = b"n+1\x00"
_VOX_OFFSET = 352  # 348-byte header + 4-byte extension flag

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
}
_CODES = {v: k for k, v in _DTYPES.items()}

_INT_CODES = (2, 4, 8)


def _open_read(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


class _Header:
    __slots__ = ("dims", "channels", "datatype", "pixdim", "affine",
                 "scl_slope", "scl_inter", "vox_offset", "swapped")


def _parse_header(raw):
    if len(raw) < _HEADER_SIZE:
        raise CorruptError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")

    for prefix, swapped in (("<", False), (">", True)):
        fields = struct.unpack(prefix + _HEADER_FMT[1:], raw[:_HEADER_SIZE])
        dim = fields[7:15]
        if 1 <= dim[0] <= 7:
            break
    else:
        raise FormatError(f"implausible dim[0]={dim[0]}; not a NIfTI-1 header")

    magic = fields[65]
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")

    hdr = _Header()
    hdr.swapped = swapped
    ndim = dim[0]
    shape = [dim[i + 1] for i in range(min(ndim, 4))]
    if any(s < 1 for s in shape):
        raise FormatError(f"non-positive dims {dim[1:5]}")
    while len(shape) < 4:
        shape.append(1)
    if ndim > 4 and any(dim[i + 1] > 1 for i in range(4, ndim)):
        raise UnsupportedError(f"{ndim}D files with populated high dims are unsupported")
    hdr.dims = tuple(shape[:3])
    hdr.channels = shape[3]

    datatype = fields[19]
    if datatype not in _DTYPES:
        raise UnsupportedError(f"unsupported NIfTI datatype code {datatype}")
    hdr.datatype = _DTYPES[datatype]

    pixdim = fields[22:30]
    hdr.pixdim = tuple(float(p) for p in pixdim[1:4])
    hdr.vox_offset = int(round(fields[30]))
    if hdr.vox_offset < _HEADER_SIZE:
        raise FormatError(f"vox_offset {hdr.vox_offset} overlaps the header")
    hdr.scl_slope = float(fields[31])
    hdr.scl_inter = float(fields[32])

    qform_code, sform_code = fields[44], fields[45]
    quat = fields[46:52]
    srow = fields[52:64]
    if sform_code >= 1:
        affine = np.eye(4)
        affine[0, :] = srow[0:4]
        affine[1, :] = srow[4:8]
        affine[2, :] = srow[8:12]
    elif qform_code >= 1:
        affine = _qform_to_affine(quat, hdr.pixdim, float(pixdim[0]))
    else:
        affine = np.diag([*hdr.pixdim, 1.0])
    hdr.affine = affine
    return hdr


def _qform_to_affine(quat, pixdim, qfac):
    b, c, d, ox, oy, oz = (float(q) for q in quat)
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    scale = np.array(pixdim, dtype=np.float64)
    if qfac < 0:
        scale[2] = -scale[2]
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = (ox, oy, oz)
    return affine


def _read(path):
    with _open_read(path) as fh:
        raw = fh.read()
    hdr = _parse_header(raw)
    nvox = int(np.prod(hdr.dims)) * hdr.channels
    nbytes = nvox * hdr.datatype.itemsize
    payload = raw[hdr.vox_offset : hdr.vox_offset + nbytes]
    if len(payload) < nbytes:
        raise CorruptError(
            f"declared data length {nbytes} exceeds payload ({len(payload)} bytes present)"
        )
    dtype = hdr.datatype.newbyteorder(">") if hdr.swapped else hdr.datatype
    arr = np.frombuffer(payload, dtype=dtype).astype(hdr.datatype)
    arr = arr.reshape((*hdr.dims, hdr.channels), order="F")
    slope = hdr.scl_slope if hdr.scl_slope != 0.0 else 1.0
    return hdr, arr, slope, hdr.scl_inter


def read_volume(path, as_labels=False):
    """Read a NIfTI-1 file.

    3D files come back as a single volume (LabelVolume when ``as_labels``),
    files with dim[4] > 1 as a list of per-channel IntensityVolumes.
    """
    hdr, arr, slope, inter = _read(path)
    if hdr.channels > 1:
        if as_labels:
            raise InvalidArgumentError("multi-channel label files are not a thing we read")
        scaled = arr.astype(np.float64) * slope + inter
        return [IntensityVolume(scaled[..., c], hdr.affine) for c in range(hdr.channels)]
    arr = arr[..., 0]
    if as_labels:
        if hdr.datatype.kind != "i" and hdr.datatype.kind != "u":
            raise InvalidArgumentError(f"label file has non-integer datatype {hdr.datatype}")
        if slope != 1.0 or inter != 0.0:
            raise UnsupportedError("scaled label volumes are not supported")
        return LabelVolume(arr.astype(np.int32), hdr.affine)
    return IntensityVolume(arr.astype(np.float64) * slope + inter, hdr.affine)


def read_image(path):
    vol = read_volume(path, as_labels=False)
    if isinstance(vol, list):
        raise InvalidArgumentError(f"{path} is multi-channel; use read_stack")
    return vol


def read_labels(path):
    return read_volume(path, as_labels=True)


def read_stack(path):
    """Read a file as a channel list (singleton for plain 3D files)."""
    vol = read_volume(path, as_labels=False)
    return vol if isinstance(vol, list) else [vol]


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _pack_header(dims, channels, dtype, affine):
    voxel_size = np.linalg.norm(np.asarray(affine)[:3, :3], axis=0)
    dim = [3 if channels == 1 else 4, *dims, channels, 1, 1, 1]
    pixdim = [1.0, *[float(v) for v in voxel_size], 1.0 if channels > 1 else 0.0, 0.0, 0.0, 0.0]
    code = _CODES[np.dtype(dtype)]
    srow = [float(x) for x in np.asarray(affine, dtype=np.float64)[:3, :].ravel()]
    return struct.pack(
        _HEADER_FMT,
        _HEADER_SIZE,  # sizeof_hdr
        b"", b"", 0, 0, b"\x00", b"\x00",  # unused legacy fields, dim_info
        *dim,
        0.0, 0.0, 0.0,  # intent_p
        0,  # intent_code
        code,
        np.dtype(dtype).itemsize * 8,  # bitpix
        0,  # slice_start
        *pixdim,
        float(_VOX_OFFSET),
        1.0,  # scl_slope
        0.0,  # scl_inter
        0, b"\x00",  # slice_end, slice_code
        b"\x02",  # xyzt_units: mm
        0.0, 0.0, 0.0, 0.0,  # cal_max, cal_min, slice_duration, toffset
        0, 0,  # glmax, glmin
        b"", b"",  # descrip, aux_file
        0,  # qform_code
        1,  # sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,  # quatern/qoffset (unused on write)
        *srow,
        b"",  # intent_name
        _MAGIC,
    )


def _coerce(data, dtype, is_labels):
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise UnsupportedError(f"cannot write datatype {dtype}")
    if is_labels and dtype.kind == "f":
        raise InvalidArgumentError("label volumes must be written with an integer datatype")
    if np.isnan(data).any():
        raise InvalidArgumentError("refusing to write NaN voxels")
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if data.min() < info.min or data.max() > info.max:
            raise InvalidArgumentError(
                f"data range [{data.min()}, {data.max()}] does not fit in {dtype}"
            )
        if not is_labels and np.any(np.abs(data - np.rint(data)) > 1e-6):
            raise InvalidArgumentError(f"non-integral intensities cannot be written as {dtype}")
        return np.rint(data).astype(dtype) if not is_labels else data.astype(dtype)
    return data.astype(dtype)


def _write_bytes(path, blob):
    tmp = f"{path}.part"
    try:
        if str(path).endswith(".gz"):
            with open(tmp, "wb") as fh:
                with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                    gz.write(blob)
        else:
            with open(tmp, "wb") as fh:
                fh.write(blob)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(vol, path, datatype=None):
    """Write one volume; float32 by default for intensities, int32 for labels."""
    is_labels = isinstance(vol, LabelVolume)
    if datatype is None:
        datatype = np.int32 if is_labels else np.float32
    arr = _coerce(vol.data, datatype, is_labels)
    blob = (
        _pack_header(vol.dims, 1, arr.dtype, vol.affine)
        + b"\x00\x00\x00\x00"
        + arr.tobytes(order="F")
    )
    _write_bytes(path, blob)


def write_stack(volumes, path, datatype=np.float32):
    """Write a channel stack as one 4D file (dim[4] = number of channels)."""
    if not volumes:
        raise InvalidArgumentError("empty channel stack")
    first = volumes[0]
    for v in volumes[1:]:
        if v.dims != first.dims or not np.allclose(v.affine, first.affine, atol=1e-6):
            raise InvalidArgumentError("stack channels must share one grid")
    stacked = np.stack([v.data for v in volumes], axis=-1)
    arr = _coerce(stacked, datatype, is_labels=False)
    blob = (
        _pack_header(first.dims, len(volumes), arr.dtype, first.affine)
        + b"\x00\x00\x00\x00"
        + arr.tobytes(order="F")
    )
    _write_bytes(path, blob)
