"""Minimal NIfTI-1 reader/writer (single-file .nii / .nii.gz, little-endian).

Covers the slice of the format this toolkit produces and consumes: 3D
volumes (a trailing singleton 4th dimension is squeezed on read), the
common integer/float datatypes, sform or qform geometry, and optional
slope/intercept scaling. Anything else is rejected with a clear error
rather than guessed at.
"""

from __future__ import annotations

import gzip
import logging
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import IOFailure, ValidationError
from .volume import Volume

logger = logging.getLogger(__name__)

_HDR_SIZE = 348
_VOX_OFFSET = 352

# NIfTI-1 datatype code -> numpy dtype (little-endian).
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("<i1"),
    512: np.dtype("<u2"),
    768: np.dtype("<u4"),
    1024: np.dtype("<i8"),
    1280: np.dtype("<u8"),
}
_DTYPE_CODES = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _qform_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scales = np.array([hdr["pixdim"][1], hdr["pixdim"][2], qfac * hdr["pixdim"][3]])
    aff = np.eye(4)
    aff[:3, :3] = r * scales
    aff[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
    return aff


def _parse_header(raw: bytes, path: Path) -> dict:
    if len(raw) < _HDR_SIZE:
        raise IOFailure(f"{path}: truncated NIfTI header ({len(raw)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HDR_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == _HDR_SIZE:
            raise IOFailure(f"{path}: big-endian NIfTI-1 is not supported")
        raise IOFailure(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise IOFailure(f"{path}: bad NIfTI-1 magic {magic!r}")
    if magic == b"ni1\x00":
        raise IOFailure(f"{path}: detached .hdr/.img pairs are not supported")

    hdr = {
        "dim": struct.unpack_from("<8h", raw, 40),
        "datatype": struct.unpack_from("<h", raw, 70)[0],
        "bitpix": struct.unpack_from("<h", raw, 72)[0],
        "pixdim": struct.unpack_from("<8f", raw, 76),
        "vox_offset": struct.unpack_from("<f", raw, 108)[0],
        "scl_slope": struct.unpack_from("<f", raw, 112)[0],
        "scl_inter": struct.unpack_from("<f", raw, 116)[0],
        "qform_code": struct.unpack_from("<h", raw, 252)[0],
        "sform_code": struct.unpack_from("<h", raw, 254)[0],
        "quatern_b": struct.unpack_from("<f", raw, 256)[0],
        "quatern_c": struct.unpack_from("<f", raw, 260)[0],
        "quatern_d": struct.unpack_from("<f", raw, 264)[0],
        "qoffset_x": struct.unpack_from("<f", raw, 268)[0],
        "qoffset_y": struct.unpack_from("<f", raw, 272)[0],
        "qoffset_z": struct.unpack_from("<f", raw, 276)[0],
        "srow": np.array(
            [
                struct.unpack_from("<4f", raw, 280),
                struct.unpack_from("<4f", raw, 296),
                struct.unpack_from("<4f", raw, 312),
            ]
        ),
    }
    return hdr


def read_volume(path, kind: str | None = None) -> Volume:
    """Read a NIfTI-1 volume.

    Args:
        path: ``.nii`` or ``.nii.gz`` file.
        kind: force ``"image"``/``"labelmap"``; by default integer
            datatypes are read as labelmaps and float datatypes as images.

    Raises:
        IOFailure: missing file, malformed header, unsupported datatype,
            or a non-3D array (a trailing singleton 4th dim is squeezed).
    """
    path = Path(path)
    if not path.is_file():
        raise IOFailure(f"no such file: {path}")
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except (OSError, EOFError, zlib.error) as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc

    hdr = _parse_header(raw, path)
    ndim = hdr["dim"][0]
    shape = tuple(int(d) for d in hdr["dim"][1 : 1 + max(ndim, 0)])
    if ndim == 4 and shape[3] == 1:
        shape = shape[:3]
    elif ndim != 3:
        raise IOFailure(f"{path}: expected a 3D volume, got dim={ndim} {shape}")
    if min(shape) < 1:
        raise IOFailure(f"{path}: degenerate shape {shape}")

    dtype = _DTYPES.get(hdr["datatype"])
    if dtype is None:
        raise IOFailure(f"{path}: unsupported NIfTI datatype code {hdr['datatype']}")
    if hdr["bitpix"] != dtype.itemsize * 8:
        raise IOFailure(f"{path}: bitpix {hdr['bitpix']} disagrees with datatype")

    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    payload = raw[offset : offset + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise IOFailure(f"{path}: voxel payload truncated")
    # NIfTI stores the first index fastest (Fortran layout).
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    data = np.ascontiguousarray(data).astype(dtype.newbyteorder("="), copy=False)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        data = data.astype(np.float64) * slope + inter

    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr["srow"]
    elif hdr["qform_code"] > 0:
        affine = _qform_affine(hdr)
    else:
        affine = np.diag([hdr["pixdim"][1] or 1.0, hdr["pixdim"][2] or 1.0, hdr["pixdim"][3] or 1.0, 1.0])
        logger.warning("%s: no sform/qform, assuming axis-aligned geometry from pixdim", path)

    norms = np.linalg.norm(affine[:3, :3], axis=0)
    pixdim = np.abs(np.array(hdr["pixdim"][1:4], dtype=np.float64))
    if np.all(pixdim > 0) and not np.allclose(norms, pixdim, rtol=1e-3, atol=1e-3):
        logger.warning(
            "%s: header pixdim %s disagrees with affine spacing %s; using the affine",
            path, tuple(pixdim), tuple(np.round(norms, 6)),
        )

    if kind is None:
        kind = "labelmap" if np.issubdtype(data.dtype, np.integer) else "image"
    try:
        return Volume(data, affine, kind, copy=False)
    except ValidationError as exc:
        raise IOFailure(f"{path}: inconsistent volume: {exc}") from exc


def write_volume(v: Volume, path) -> None:
    """Write a volume as single-file NIfTI-1; ``.gz`` suffix gzips it.

    The voxel payload round-trips bit-exactly; the affine is stored in the
    (float32) sform, so geometry round-trips to ~1e-7 relative precision.
    """
    path = Path(path)
    data = v.data
    native = data.dtype.newbyteorder("=")
    if native == np.dtype(bool):
        native = np.dtype(np.uint8)
    if native not in _DTYPE_CODES:
        # Fall back to the widest matching family rather than refuse.
        native = np.dtype(np.int64) if np.issubdtype(native, np.integer) else np.dtype(np.float64)
    code = _DTYPE_CODES[native]
    le = native.newbyteorder("<")

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, le.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, *v.affine[0])
    struct.pack_into("<4f", hdr, 296, *v.affine[1])
    struct.pack_into("<4f", hdr, 312, *v.affine[2])
    hdr[344:348] = b"n+1\x00"

    payload = np.asarray(data, dtype=le).tobytes(order="F")
    try:
        with _open(path, "wb") as f:
            f.write(bytes(hdr))
            f.write(b"\x00" * (_VOX_OFFSET - _HDR_SIZE))  # extension flag
            f.write(payload)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
