"""Binary tensor dumps (BT2) and binary PPM/PGM images.

BT2 layout: magic ``b"BT2\\0"``, u8 dtype code (0 = f32, 1 = f64), u8 rank,
rank little-endian u32 dims, then the row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

BT2_MAGIC = b"BT2\0"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f4": 0, "f8": 1}


def encode_bt2(array):
    a = np.asarray(array)
    code = _CODES.get(a.dtype.str[1:])
    if code is None:
        raise ConfigError(f"BT2 stores float32/float64 only, got {a.dtype}")
    if a.ndim > 255:
        raise ConfigError("BT2 rank must fit in a byte")
    header = BT2_MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode_bt2(blob):
    if blob[:4] != BT2_MAGIC:
        raise ConfigError("not a BT2 tensor dump (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise ConfigError(f"unknown BT2 dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    offset = 6 + 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = blob[offset:]
    if len(payload) != count * dtype.itemsize:
        raise ConfigError(f"BT2 payload has {len(payload)} bytes, expected "
                          f"{count * dtype.itemsize}")
    native = np.float32 if code == 0 else np.float64
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(native)


def save_bt2(path, array):
    Path(path).write_bytes(encode_bt2(array))


def load_bt2(path):
    return decode_bt2(Path(path).read_bytes())


# --- netpbm ---------------------------------------------------------------

def _read_header(blob):
    """Parse magic, width, height, maxval; returns (fields, payload offset)."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ConfigError("truncated PNM header")
        fields.append(blob[start:pos])
    return fields, pos + 1


def decode_pnm(blob):
    """Binary P5/P6 image as a uint8/uint16 array of shape (h, w) or (h, w, 3)."""
    fields, offset = _read_header(blob)
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ConfigError(f"unsupported netpbm type {magic!r}; need binary P5 or P6")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ConfigError(f"bad PNM header fields {fields[1:]}") from exc
    if not 0 < maxval < 65536:
        raise ConfigError(f"PNM maxval {maxval} out of range")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    if len(blob) - offset < n * dtype.itemsize:
        raise ConfigError(f"PNM payload truncated: need {n * dtype.itemsize} bytes, have "
                          f"{len(blob) - offset}")
    data = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_pnm(image, maxval=255):
    a = np.asarray(image)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ConfigError(f"PNM image must be (h, w) or (h, w, 3), got {a.shape}")
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise ConfigError(f"pixel values outside [0, {maxval}]")
    h, w = a.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    return b"%s\n%d %d\n%d\n" % (magic, w, h, maxval) + a.astype(dtype).tobytes()


def read_pnm(path):
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path, image, maxval=255):
    Path(path).write_bytes(encode_pnm(image, maxval))


def image_to_tensor(pixels, maxval=255):
    """(h, w, 3) or (h, w) pixels -> (1, 3, h, w) float32 in [0, 1], RGB channel order."""
    a = np.asarray(pixels, dtype=np.float32) / maxval
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    return a.transpose(2, 0, 1)[None].copy()


def labels_to_pgm(labels):
    """Label map -> P5 bytes, one gray level (the class index) per class."""
    labels = np.asarray(labels)
    top = int(labels.max(initial=0))
    if labels.min(initial=0) < 0:
        raise ConfigError("negative labels cannot be stored as gray levels")
    return encode_pnm(labels, 255 if top <= 255 else 65535)
