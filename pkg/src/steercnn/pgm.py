"""Binary greyscale PGM (P5) export."""
from pathlib import Path

import numpy as np


def to_bytes(plane, lo=None, hi=None) -> np.ndarray:
    """Map ``[lo, hi]`` linearly onto 0..255; a flat plane maps to mid-grey."""
    a = np.asarray(plane, dtype=float)
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    if hi - lo <= 0:
        return np.full(a.shape, 128, dtype=np.uint8)
    scaled = np.round((a - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def write_pgm(path, plane, lo=None, hi=None) -> Path:
    path = Path(path)
    data = to_bytes(plane, lo, hi)
    if data.ndim != 2:
        raise ValueError(f"PGM planes must be 2-D, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM: {path}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
