"""Minimal single-file NIfTI-1 (.nii / .nii.gz) reader and writer.

Covers exactly what the pipeline needs: 3D volumes, datatypes uint8 / int16 /
int32 / float32 / float64, pixdim spacing, verbatim sform affine, optional
scl_slope / scl_inter intensity scaling, and gzip compression detected by the
0x1F8B prefix. Byte order is resolved from sizeof_hdr. NIfTI-2 and DICOM are
out of scope.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .volume import Grid, LabelMap, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag

_DTYPE_CODES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}

_STRUCT = struct.Struct(
    "<i"  # sizeof_hdr
    "10s18s i h c B"  # data_type, db_name, extents, session_error, regular, dim_info
    "8h"  # dim
    "3f h"  # intent_p1..p3, intent_code
    "h h h"  # datatype, bitpix, slice_start
    "8f"  # pixdim
    "f f f"  # vox_offset, scl_slope, scl_inter
    "h B B"  # slice_end, slice_code, xyzt_units
    "f f f f"  # cal_max, cal_min, slice_duration, toffset
    "i i"  # glmax, glmin
    "80s 24s"  # descrip, aux_file
    "h h"  # qform_code, sform_code
    "6f"  # quatern_b..d, qoffset_x..z
    "4f 4f 4f"  # srow_x, srow_y, srow_z
    "16s 4s"  # intent_name, magic
)
assert _STRUCT.size == HEADER_SIZE


def _read_bytes(path: Union[str, Path]) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, path) -> Tuple[dict, str]:
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: file shorter than a NIfTI-1 header")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise ValueError(f"{path}: not NIfTI-1 (sizeof_hdr != 348 in either byte order)")
        order = ">"
    fields = struct.unpack(order + _STRUCT.format[1:], raw[:HEADER_SIZE])
    names = (
        ["sizeof_hdr", "data_type", "db_name", "extents", "session_error", "regular", "dim_info"]
        + ["dim"]
        + ["intent_p1", "intent_p2", "intent_p3", "intent_code", "datatype", "bitpix", "slice_start"]
        + ["pixdim"]
        + ["vox_offset", "scl_slope", "scl_inter", "slice_end", "slice_code", "xyzt_units"]
        + ["cal_max", "cal_min", "slice_duration", "toffset", "glmax", "glmin", "descrip", "aux_file"]
        + ["qform_code", "sform_code", "quatern", "srow_x", "srow_y", "srow_z", "intent_name", "magic"]
    )
    hdr = {}
    i = 0
    for name in names:
        if name == "dim":
            hdr[name] = fields[i : i + 8]
            i += 8
        elif name == "pixdim":
            hdr[name] = fields[i : i + 8]
            i += 8
        elif name == "quatern":
            hdr[name] = fields[i : i + 6]
            i += 6
        elif name in ("srow_x", "srow_y", "srow_z"):
            hdr[name] = fields[i : i + 4]
            i += 4
        else:
            hdr[name] = fields[i]
            i += 1
    if hdr["magic"][:3] not in (b"n+1", b"ni1"):
        raise ValueError(f"{path}: bad NIfTI magic {hdr['magic']!r}")
    return hdr, order


def read_nifti_header(path: Union[str, Path]) -> Tuple[Tuple[int, int, int], Tuple[float, float, float]]:
    """Return (dims, spacing) without loading voxel data."""
    raw = _read_bytes(path)
    hdr, _ = _parse_header(raw, path)
    dims = tuple(int(d) for d in hdr["dim"][1:4])
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    return dims, spacing  # type: ignore[return-value]


def read_nifti(path: Union[str, Path], kind: str = "auto") -> Grid:
    """Read a NIfTI-1 file as a Volume or LabelMap.

    ``kind``: "auto" maps uint8 payloads to LabelMap and everything else to
    Volume; "image" / "labels" force the container (labels require an
    unscaled integer payload).
    """
    if kind not in ("auto", "image", "labels"):
        raise ValueError(f"unknown kind {kind!r}")
    raw = _read_bytes(path)
    hdr, order = _parse_header(raw, path)

    ndim = hdr["dim"][0]
    if ndim < 3 or any(d > 1 for d in hdr["dim"][4 : 1 + max(3, ndim)]):
        raise ValueError(f"{path}: only 3D volumes are supported, dim={hdr['dim']}")
    dims = tuple(int(d) for d in hdr["dim"][1:4])
    if any(d < 1 for d in dims):
        raise ValueError(f"{path}: non-positive dims {dims}")
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    if any(p <= 0 for p in spacing):
        raise ValueError(f"{path}: non-positive pixdim {spacing}")

    code = hdr["datatype"]
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unsupported datatype code {code}")
    dtype = np.dtype(order + _DTYPE_CODES[code])

    offset = int(hdr["vox_offset"])
    n = dims[0] * dims[1] * dims[2]
    payload = raw[offset : offset + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise ValueError(f"{path}: payload shorter than dim implies")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    data = np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    scaled = slope != 0.0 and (slope, inter) != (1.0, 0.0)
    if scaled:
        data = data.astype(np.float64) * slope + inter

    affine = np.eye(4)
    if hdr["sform_code"] > 0:
        affine[0, :] = hdr["srow_x"]
        affine[1, :] = hdr["srow_y"]
        affine[2, :] = hdr["srow_z"]
    else:
        affine[0, 0], affine[1, 1], affine[2, 2] = spacing

    as_labels = kind == "labels" or (kind == "auto" and code == 2 and not scaled)
    if as_labels:
        if scaled or not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"{path}: cannot read scaled/float payload as labels")
        return LabelMap(data, spacing, affine)
    return Volume(data.astype(np.float32), spacing, affine)


def write_nifti(vol: Grid, path: Union[str, Path]) -> None:
    """Write a Volume as float32 or a LabelMap as uint8 (int16/int32 if the

    label values do not fit in a byte). Gzip-compresses when the path ends in
    ``.gz``. pixdim carries the spacing; the affine goes into the sform rows.
    """
    path = Path(path)
    if isinstance(vol, LabelMap):
        data = vol.data
        if data.dtype != np.uint8:
            data = data.astype(np.int16 if data.max() <= np.iinfo(np.int16).max else np.int32)
    else:
        data = vol.data.astype(np.float32)
    code = _CODE_FOR_DTYPE[data.dtype]

    dim = (3, *vol.dims, 1, 1, 1, 1)
    pixdim = (1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    aff = vol.affine
    header = _STRUCT.pack(
        HEADER_SIZE,
        b"", b"", 0, 0, b"r", 0,
        *dim,
        0.0, 0.0, 0.0, 0,
        code, data.dtype.itemsize * 8, 0,
        *pixdim,
        float(VOX_OFFSET), 1.0, 0.0,
        0, 0, 2,  # xyzt_units: mm
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"pvseg", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *(float(v) for v in aff[0]),
        *(float(v) for v in aff[1]),
        *(float(v) for v in aff[2]),
        b"", b"n+1\x00",
    )
    blob = header + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # mtime=0 keeps byte-identical output for identical inputs
        path.write_bytes(gzip.compress(blob, mtime=0))
    else:
        path.write_bytes(blob)
