"""Dense image/patch primitives and bit-exact PPM file I/O.

Images and patches are plain float64 numpy arrays in [0, 1] with layout
(channel, row, col).  Error maps are (row, col) float arrays, signed.
Locations are (row, col) pairs addressing the *center* of a region; a
region of side ``s`` centered at ``c`` occupies rows ``[c - s//2,
c - s//2 + s)`` (floor-based top-left anchoring, which works for both odd
and even sides).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "BoundsError",
    "PpmParseError",
    "attach",
    "crop",
    "footprint_slices",
    "init_striped_patch",
    "read_ppm",
    "write_ppm",
]


class BoundsError(ValueError):
    """Placement or crop region does not fit inside the base tensor."""


class PpmParseError(ValueError):
    """Malformed PPM stream; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def footprint_slices(shape, side, at):
    """Row/col slices of a side x side region centered at ``at``.

    ``shape`` is the (rows, cols) extent of the base; raises BoundsError
    with the offending coordinates when the region does not fit.
    """
    rows, cols = int(shape[-2]), int(shape[-1])
    r, c = int(at[0]), int(at[1])
    side = int(side)
    top = r - side // 2
    left = c - side // 2
    if top < 0 or left < 0 or top + side > rows or left + side > cols:
        raise BoundsError(
            f"region side={side} centered at ({r}, {c}) spans "
            f"[{top}:{top + side}, {left}:{left + side}] outside a "
            f"{rows}x{cols} base"
        )
    return slice(top, top + side), slice(left, left + side)


def attach(base, insert, at):
    """Return a copy of ``base`` with ``insert`` written at center ``at``.

    ``base`` is (C, H, W), ``insert`` is (C, s, s).  Pixels inside the
    insert footprint are replaced; everything else is bit-identical to
    ``base``.  ``base`` itself is never mutated.
    """
    base = np.asarray(base)
    insert = np.asarray(insert)
    if insert.ndim != 3 or insert.shape[-1] != insert.shape[-2]:
        raise ValueError(f"insert must be (C, s, s), got {insert.shape}")
    if insert.shape[0] != base.shape[0]:
        raise ValueError(
            f"channel mismatch: base has {base.shape[0]}, insert has {insert.shape[0]}"
        )
    rs, cs = footprint_slices(base.shape, insert.shape[-1], at)
    out = base.copy()
    out[:, rs, cs] = insert
    return out


def crop(base, side, at):
    """Extract the side x side region of ``base`` centered at ``at``.

    Inverse of :func:`attach`: ``attach(base, crop(base, s, at), at)``
    reproduces ``base`` exactly.
    """
    base = np.asarray(base)
    rs, cs = footprint_slices(base.shape, side, at)
    return base[:, rs, cs].copy()


def init_striped_patch(side, rng):
    """Random vertical-striped patch of shape (3, side, side).

    Every 1-pixel-wide column gets one color drawn uniformly from the 8
    corners {0,1}^3, so all values are exactly 0.0 or 1.0.  Deterministic
    for a fixed generator state.
    """
    side = int(side)
    if side < 2:
        raise ValueError(f"patch side must be >= 2, got {side}")
    colors = rng.integers(0, 2, size=(3, side)).astype(np.float64)
    return np.repeat(colors[:, None, :], side, axis=1)


# --- PPM (P6, maxval 255) ------------------------------------------------
#
# Interchange format: ASCII "P6", whitespace-separated width/height/maxval
# (maxval must be 255), one whitespace byte, then 3*H*W bytes of row-major
# interleaved RGB.  Quantization v -> round(v*255)/255 is the only loss.


def write_ppm(path, tensor):
    """Write a (3, H, W) tensor in [0, 1] as a binary P6 file."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) tensor, got {tensor.shape}")
    if tensor.min() < 0.0 or tensor.max() > 1.0:
        raise ValueError("tensor values must lie in [0, 1]")
    h, w = tensor.shape[1], tensor.shape[2]
    # round-half-up so 0.5 maps to byte 128
    bytes_hw3 = np.floor(tensor * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(bytes_hw3.tobytes())


def _read_header_token(data, pos):
    # skip whitespace and '#' comments, then read one token
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PpmParseError("unexpected end of header", pos)
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_ppm(path):
    """Read a binary P6 file into a (3, H, W) float64 tensor in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise PpmParseError(f"bad magic {data[:2]!r}, expected b'P6'", 0)
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_header_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise PpmParseError(f"non-numeric header field {token!r}", pos) from None
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise PpmParseError(f"non-positive dimensions {w}x{h}", pos)
    if maxval != 255:
        raise PpmParseError(f"unsupported maxval {maxval}, only 255", pos)
    pos += 1  # single whitespace byte after maxval
    expected = 3 * h * w
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise PpmParseError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}",
            pos + len(payload),
        )
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0
