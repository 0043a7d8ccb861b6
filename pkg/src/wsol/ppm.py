"""Binary PPM (P6, maxval 255) reader and writer."""
from __future__ import annotations

import numpy as np


class CodecError(ValueError):
    pass


def encode_ppm(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise CodecError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    # round half up
    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + data.tobytes()


def decode_ppm(blob: bytes):
    if blob[:2] != b"P6":
        raise CodecError(f"unsupported magic {blob[:2]!r}; only binary P6 is handled")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CodecError("truncated PPM header")
        token = blob[start:pos]
        if not token.isdigit():
            raise CodecError(f"bad PPM header field {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise CodecError(f"maxval {maxval} unsupported; expected 255")
    if w < 1 or h < 1:
        raise CodecError("PPM dimensions must be positive")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise CodecError(f"truncated PPM payload: {len(payload)} of {w * h * 3} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(img, path):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))
