"""Netpbm images, 16-bit label maps and a raw float plane container.

Raw float container layout (little-endian)::

    magic  b"SPRF"
    u32    height
    u32    width
    u32    channels
    f32    data[height * width * channels]   (row-major, channel fastest)
"""

from __future__ import annotations

import struct

import numpy as np

RAW_MAGIC = b"SPRF"


class ImageFormatError(ValueError):
    pass


def _header_tokens(data, n):
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def encode_ppm(image) -> bytes:
    """Colour image in [0, 1] (H, W, 3) as binary P6 with maxval 255."""
    img = np.asarray(image, float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError("PPM needs an (H, W, 3) image")
    q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + q.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    (magic, w, h, mx), pos = _header_tokens(data, 4)
    if magic != b"P6" or int(mx) != 255:
        raise ImageFormatError("expected an 8-bit P6 image")
    w, h = int(w), int(h)
    px = np.frombuffer(data[pos:pos + w * h * 3], np.uint8)
    if px.size != w * h * 3:
        raise ImageFormatError("truncated P6 pixel data")
    return px.reshape(h, w, 3).astype(float) / 255


def encode_pgm16(labels) -> bytes:
    """Integer label map as binary P5, maxval 65535 (big-endian samples)."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ImageFormatError("PGM needs a 2-D label map")
    if lab.size and (lab.min() < 0 or lab.max() > 65535):
        raise ImageFormatError("labels must fit in 16 bits")
    return b"P5\n%d %d\n65535\n" % (lab.shape[1], lab.shape[0]) + lab.astype(">u2").tobytes()


def decode_pgm16(data: bytes) -> np.ndarray:
    (magic, w, h, mx), pos = _header_tokens(data, 4)
    if magic != b"P5" or int(mx) != 65535:
        raise ImageFormatError("expected a 16-bit P5 image")
    w, h = int(w), int(h)
    body = data[pos:pos + 2 * w * h]
    if len(body) != 2 * w * h:
        raise ImageFormatError("truncated P5 pixel data")
    raw = np.frombuffer(body, ">u2")
    return raw.reshape(h, w).astype(np.int32)


def encode_raw(plane) -> bytes:
    a = np.asarray(plane, float)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ImageFormatError("raw planes must be (H, W) or (H, W, C)")
    h, w, c = a.shape
    return RAW_MAGIC + struct.pack("<III", h, w, c) + a.astype("<f4").tobytes()


def decode_raw(data: bytes) -> np.ndarray:
    if data[:4] != RAW_MAGIC:
        raise ImageFormatError("bad raw float magic")
    if len(data) < 16:
        raise ImageFormatError("truncated raw float header")
    h, w, c = struct.unpack_from("<III", data, 4)
    if len(data) - 16 != 4 * h * w * c:
        raise ImageFormatError(f"raw float body has {len(data) - 16} bytes, expected {4 * h * w * c}")
    body = np.frombuffer(data[16:], "<f4")
    return body.reshape(h, w, c).astype(np.float64)


def write_bytes(path, data: bytes):
    with open(path, "wb") as fh:
        fh.write(data)


def read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
