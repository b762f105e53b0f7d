"""Binary (P5) greymap I/O for lattices: solid is black, void is white."""
from __future__ import annotations

from pathlib import Path

import numpy as np

SOLID, VOID = 0, 255


def encode(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    h, w = grid.shape
    pixels = np.where(grid != 0, SOLID, VOID).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode(data: bytes) -> np.ndarray:
    """Parse a P5 image into a 0/1 grid (pixels darker than mid-grey are solid)."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError("truncated PGM header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError("16-bit PGM is not supported")
    pos += 1  # single whitespace byte after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return (raw.reshape(h, w) < (maxval + 1) // 2).astype(np.uint8)


def write_pgm(grid, path) -> None:
    Path(path).write_bytes(encode(grid))


def read_pgm(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
