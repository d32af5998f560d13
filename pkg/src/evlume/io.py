"""Bit-exact file formats: tensor container, checkpoints, PPM/PGM, events, config.

All multi-byte integers are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .events import EVENT_DTYPE

TENSOR_MAGIC = b"EVLT"
EVENT_MAGIC = b"EVST"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Base for container format violations."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ConsistencyError(FormatError):
    pass


def _tensor_record(arr):
    # reshape preserves 0-d shapes, which ascontiguousarray promotes to 1-d
    arr = np.ascontiguousarray(arr).reshape(np.shape(arr))
    code = _DTYPE_BY_KIND.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; only f32/f64 are stored")
    parts = [struct.pack("<B", code), struct.pack("<I", arr.ndim)]
    for d in arr.shape:
        parts.append(struct.pack("<Q", d))
    parts.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: needed {self.off + n} bytes, file has {len(self.data)}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def _read_tensor_record(r):
    code = r.u8()
    if code not in _DTYPE_CODES:
        raise FormatError(f"{r.path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    ndim = r.u32()
    dims = tuple(r.u64() for _ in range(ndim))
    count = int(np.prod(dims)) if dims else 1
    payload = r.take(count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.copy()


def _check_header(r):
    magic = r.take(4)
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"{r.path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version = r.u8()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{r.path}: unsupported version {version}")


def write_tensor(path, arr):
    path = Path(path)
    blob = TENSOR_MAGIC + struct.pack("<B", FORMAT_VERSION) + _tensor_record(arr)
    path.write_bytes(blob)


def read_tensor(path):
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _check_header(r)
    arr = _read_tensor_record(r)
    if r.off != len(r.data):
        raise ConsistencyError(f"{path}: {len(r.data) - r.off} trailing bytes after payload")
    return arr


def write_checkpoint(path, named_arrays):
    """Write a name -> array map as a count-prefixed list of tensor records."""
    path = Path(path)
    parts = [TENSOR_MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<I", len(named_arrays))]
    for name in sorted(named_arrays):
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(_tensor_record(named_arrays[name]))
    path.write_bytes(b"".join(parts))


def read_checkpoint(path):
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _check_header(r)
    count = r.u32()
    out = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        out[name] = _read_tensor_record(r)
    if r.off != len(r.data):
        raise ConsistencyError(f"{path}: trailing bytes after {count} records")
    return out


# -- PPM / PGM -------------------------------------------------------------

def write_ppm(path, image):
    """Write an H x W x 3 [0,1] image as binary P6, maxval 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"expected HxWx3 image, got {image.shape}")
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _read_pnm_header(raw, path, magic):
    if not raw.startswith(magic):
        raise FormatError(f"{path}: unsupported format (expected {magic.decode()})")
    fields = []
    off = 2
    while len(fields) < 3:
        while off < len(raw) and raw[off : off + 1].isspace():
            off += 1
        if off < len(raw) and raw[off : off + 1] == b"#":
            while off < len(raw) and raw[off : off + 1] != b"\n":
                off += 1
            continue
        start = off
        while off < len(raw) and not raw[off : off + 1].isspace():
            off += 1
        fields.append(int(raw[start:off]))
    off += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    return w, h, off


def read_ppm(path):
    path = Path(path)
    raw = path.read_bytes()
    w, h, off = _read_pnm_header(raw, path, b"P6")
    expected = w * h * 3
    pixels = raw[off:]
    if len(pixels) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, image):
    """Write an H x W [0,1] grayscale image as binary P5, maxval 255."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"expected HxW image, got {image.shape}")
    h, w = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path):
    path = Path(path)
    raw = path.read_bytes()
    w, h, off = _read_pnm_header(raw, path, b"P5")
    pixels = raw[off:]
    if len(pixels) != w * h:
        raise TruncatedFileError(f"{path}: expected {w * h} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# -- event streams ---------------------------------------------------------

_EVENT_WIRE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<f4"), ("c", "u1"), ("p", "i1")])


def write_events(path, events):
    """Serialize an event stream: magic, u32 count, then packed records."""
    wire = np.empty(events.size, dtype=_EVENT_WIRE)
    for f in ("x", "y", "t", "c", "p"):
        wire[f] = events[f]
    Path(path).write_bytes(EVENT_MAGIC + struct.pack("<I", events.size) + wire.tobytes())


def read_events(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != EVENT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {EVENT_MAGIC!r}")
    (count,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != count * _EVENT_WIRE.itemsize:
        raise TruncatedFileError(
            f"{path}: expected {count * _EVENT_WIRE.itemsize} event bytes, got {len(body)}"
        )
    wire = np.frombuffer(body, dtype=_EVENT_WIRE)
    out = np.empty(count, dtype=EVENT_DTYPE)
    for f in ("x", "y", "t", "c", "p"):
        out[f] = wire[f]
    return out


# -- key=value config ------------------------------------------------------

def parse_config(text):
    """Parse UTF-8 key=value lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


def write_config(path, mapping):
    lines = [f"{k}={v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
