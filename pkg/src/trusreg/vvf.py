"""VVF/1 volume files: ``key = value`` text header ending in ``END``, then raw payload.

Payload is nx*ny*nz little-endian float32 with x fastest, optionally
followed by one byte (0/1) per voxel of mask.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .volume import Volume

KEYS = ("vvf_version", "dims", "spacing_mm", "origin_mm", "axes", "dtype", "mask")
_COUNTS = {"dims": 3, "spacing_mm": 3, "origin_mm": 3, "axes": 9}
_MAX_HEADER = 1 << 16


class FormatError(ValueError):
    """Malformed VVF file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _fmt(values) -> str:
    # repr round-trips doubles exactly
    return " ".join(repr(float(v)) for v in values)


def write_volume(volume: Volume, path) -> None:
    nx, ny, nz = volume.dims
    lines = [
        "vvf_version = 1",
        f"dims = {nx} {ny} {nz}",
        f"spacing_mm = {_fmt(volume.spacing)}",
        f"origin_mm = {_fmt(volume.origin)}",
        f"axes = {_fmt(volume.axes.ravel())}",
        "dtype = f32le",
        f"mask = {'present' if volume.mask is not None else 'absent'}",
        "END",
    ]
    payload = [("\n".join(lines) + "\n").encode("ascii"),
               volume.data.astype("<f4").ravel(order="F").tobytes()]
    if volume.mask is not None:
        payload.append(volume.mask.ravel(order="F").astype(np.uint8).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(payload))
    os.replace(tmp, path)


def _parse_numbers(key: str, text: str, offset: int) -> list:
    parts = text.split()
    if len(parts) != _COUNTS[key]:
        raise FormatError(f"{key} needs {_COUNTS[key]} values, got {len(parts)}", offset)
    try:
        if key == "dims":
            vals = [int(p) for p in parts]
        else:
            vals = [float(p) for p in parts]
    except ValueError:
        raise FormatError(f"{key} has a non-numeric value", offset) from None
    return vals


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    header = {}
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0 or end > _MAX_HEADER:
            raise FormatError("header is not terminated by END", pos)
        try:
            line = raw[pos:end].decode("ascii")
        except UnicodeDecodeError:
            raise FormatError("header is not ASCII", pos) from None
        if line == "END":
            pos = end + 1
            break
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise FormatError(f"header line {line!r} is not 'key = value'", pos)
        if key not in KEYS:
            raise FormatError(f"unknown header key {key!r}", pos)
        if key in header:
            raise FormatError(f"duplicate header key {key!r}", pos)
        if key == "vvf_version" and value != "1":
            raise FormatError(f"unsupported vvf_version {value!r}", pos)
        if key == "dtype" and value != "f32le":
            raise FormatError(f"unsupported dtype {value!r}", pos)
        if key == "mask" and value not in ("present", "absent"):
            raise FormatError(f"mask must be present or absent, got {value!r}", pos)
        header[key] = (_parse_numbers(key, value, pos) if key in _COUNTS else value, pos)
        pos = end + 1
    missing = [k for k in KEYS if k not in header]
    if missing:
        raise FormatError(f"missing header keys {missing}", pos)
    dims, dpos = header["dims"]
    if min(dims) < 1:
        raise FormatError("dims must be positive", dpos)
    n = dims[0] * dims[1] * dims[2]
    has_mask = header["mask"][0] == "present"
    expected = n * 4 + (n if has_mask else 0)
    if len(raw) - pos != expected:
        raise FormatError(f"payload is {len(raw) - pos} bytes, expected {expected}",
                          min(len(raw), pos + expected))
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
    data = data.reshape(dims, order="F").astype(np.float32)
    mask = None
    if has_mask:
        m = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos + 4 * n)
        if np.any(m > 1):
            raise FormatError("mask bytes must be 0 or 1", pos + 4 * n + int(np.argmax(m > 1)))
        mask = m.reshape(dims, order="F").astype(bool)
    try:
        return Volume(data, header["spacing_mm"][0], header["origin_mm"][0],
                      np.reshape(header["axes"][0], (3, 3)), mask)
    except ValueError as e:
        raise FormatError(str(e), header["axes"][1]) from None
