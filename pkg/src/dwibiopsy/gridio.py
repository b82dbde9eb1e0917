"""Grid file format: one JSON header line then raw little-endian values.

Header keys are ``dims``, ``spacing_mm``, ``origin_mm``, ``dtype`` (``f32``
or ``u8``) and ``unit``.  Values are stored with x varying fastest.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import FormatError
from .grid import UNITS, LabelGrid3, ScalarGrid3

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
LABEL_UNIT = "dimensionless"


def encode_grid(grid) -> bytes:
    if isinstance(grid, LabelGrid3):
        dtype, unit, data = "u8", LABEL_UNIT, grid.labels
    else:
        dtype, unit, data = "f32", grid.unit, grid.values
    header = {
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing_mm),
        "origin_mm": list(grid.origin_mm),
        "dtype": dtype,
        "unit": unit,
    }
    line = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    body = np.asarray(data).ravel(order="F").astype(_DTYPES[dtype]).tobytes()
    return line + body


def decode_grid(blob: bytes):
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("missing header terminator", offset=len(blob))
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header JSON: {exc}", offset=getattr(exc, "pos", 0)) from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", offset=0)
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "unit"):
        if key not in header:
            raise FormatError(f"header lacks {key!r}", offset=0)
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}", offset=0)
    if header["unit"] not in UNITS:
        raise FormatError(f"unknown unit tag {header['unit']!r}", offset=0)
    dims = header["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(n, int) and n >= 1 for n in dims)
    ):
        raise FormatError(f"dims must be 3 positive integers, got {dims!r}", offset=0)
    count = int(np.prod(dims))
    expected = count * _DTYPES[dtype].itemsize
    body = blob[nl + 1:]
    if len(body) != expected:
        raise FormatError(
            f"body holds {len(body)} bytes, expected {expected}", offset=nl + 1 + min(len(body), expected)
        )
    flat = np.frombuffer(body, dtype=_DTYPES[dtype])
    arr = flat.reshape(tuple(dims), order="F")
    try:
        if dtype == "u8":
            return LabelGrid3(arr, header["spacing_mm"], header["origin_mm"])
        return ScalarGrid3(arr.astype(np.float64), header["spacing_mm"], header["origin_mm"], header["unit"])
    except ValueError as exc:
        raise FormatError(str(exc), offset=nl + 1) from None


def save_grid(grid, path) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(encode_grid(grid))
    os.replace(tmp, path)


def load_grid(path):
    with open(path, "rb") as fh:
        return decode_grid(fh.read())
