"""Dense 2-D fields, forward differences, smoothed total variation and I/O.

A field is a plain ``float64`` numpy array of shape ``(height, width)``.
Stacks of fields (mask channels) are arrays of shape ``(channels, height, width)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = [
    "as_field",
    "forward_diff",
    "forward_diff_adjoint",
    "tv_value_and_grad",
    "masked_mean",
    "read_pgm",
    "write_pgm",
    "write_ppm",
    "read_field_text",
    "write_field_text",
]

DEFAULT_TV_EPS = 1e-6
DEGENERATE_SUPPORT = 1e-12


def as_field(f, name="field"):
    """Return ``f`` as a finite, contiguous float64 2-D array."""
    arr = np.ascontiguousarray(f, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def forward_diff(f):
    """Forward differences with a replicate boundary.

    Returns ``(gx, gy)`` where ``gx`` differences along columns and ``gy``
    along rows. The last column of ``gx`` and the last row of ``gy`` are zero.
    """
    f = np.asarray(f, dtype=np.float64)
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[..., :, :-1] = f[..., :, 1:] - f[..., :, :-1]
    gy[..., :-1, :] = f[..., 1:, :] - f[..., :-1, :]
    return gx, gy


def forward_diff_adjoint(px, py):
    """Adjoint of :func:`forward_diff` (a negative divergence)."""
    out = np.zeros(np.broadcast_shapes(np.shape(px), np.shape(py)))
    out[..., :, :-1] -= px[..., :, :-1]
    out[..., :, 1:] += px[..., :, :-1]
    out[..., :-1, :] -= py[..., :-1, :]
    out[..., 1:, :] += py[..., :-1, :]
    return out


def tv_value_and_grad(f, eps=DEFAULT_TV_EPS):
    """Smoothed total variation ``sum(sqrt(gx**2 + gy**2 + eps**2)) - H*W*eps``.

    The offset makes constant fields score exactly zero. Works on a single
    field or on a stack, in which case the value is summed over channels.

    Returns
    -------
    value : float
    grad : ndarray
        Derivative of ``value`` with respect to every pixel of ``f``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    f = np.asarray(f, dtype=np.float64)
    gx, gy = forward_diff(f)
    mag = np.sqrt(gx * gx + gy * gy + eps * eps)
    value = float(np.sum(mag - eps))
    grad = forward_diff_adjoint(gx / mag, gy / mag)
    return value, grad


def masked_mean(f, w):
    """Weighted mean ``sum(f*w) / sum(w)``.

    Returns ``(mean, degenerate)``. When the weights sum below ``1e-12`` the
    mean is reported as 0 and ``degenerate`` is True.
    """
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if f.shape != w.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {w.shape}")
    total = float(np.sum(w))
    if total < DEGENERATE_SUPPORT:
        return 0.0, True
    return float(np.sum(f * w)) / total, False


# --- serialization -------------------------------------------------------


def _read_token(buf, pos):
    # PGM header tokens are whitespace separated and may carry '#' comments.
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated PNM header")
    return buf[start:pos], pos


def _read_pnm(path, magic):
    buf = Path(path).read_bytes()
    tok, pos = _read_token(buf, 0)
    if tok != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tok!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid header ({w}x{h}, maxval {maxval})")
    pos += 1  # single whitespace byte before raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    channels = 3 if magic == b"P6" else 1
    count = w * h * channels
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raw.reshape(shape), maxval


def read_pgm(path, normalize=True):
    """Read a binary (P5) PGM.

    With ``normalize`` the values are divided by ``maxval`` (so 8-bit images
    land in [0, 1] via division by 255); otherwise raw integers are returned
    as a float field, which is how label maps are read.
    """
    try:
        raw, maxval = _read_pnm(path, b"P5")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read PGM {path}: {exc}") from exc
    out = raw.astype(np.float64)
    return out / maxval if normalize else out


def write_pgm(path, f, bits=8, normalized=True):
    """Write a field as P5 PGM with 8 or 16 bits per pixel.

    ``normalized`` fields are taken to live in [0, 1] and are scaled to the
    full integer range; otherwise values are written as rounded integers.
    """
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    f = np.asarray(f, dtype=np.float64)
    maxval = 255 if bits == 8 else 65535
    vals = np.clip(f, 0.0, 1.0) * maxval if normalized else f
    vals = np.clip(np.rint(vals), 0, maxval)
    dtype = np.dtype("u1") if bits == 8 else np.dtype(">u2")
    h, w = f.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + vals.astype(dtype).tobytes())


def write_ppm(path, rgb):
    """Write an ``(H, W, 3)`` array with values in [0, 1] as 8-bit P6."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("rgb must have shape (H, W, 3)")
    h, w, _ = rgb.shape
    vals = np.rint(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + vals.tobytes())


def write_field_text(path, f):
    """Write ``FIELD w h`` followed by the row-major values, one per line."""
    f = as_field(f)
    h, w = f.shape
    lines = [f"FIELD {w} {h}"]
    lines.extend(repr(float(v)) for v in f.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def read_field_text(path):
    tokens = Path(path).read_text().split()
    if len(tokens) < 3 or tokens[0] != "FIELD":
        raise ValueError(f"{path}: missing FIELD header")
    w, h = int(tokens[1]), int(tokens[2])
    values = tokens[3:]
    if w < 1 or h < 1 or len(values) != w * h:
        raise ValueError(f"{path}: expected {w * h} values, found {len(values)}")
    return as_field(np.array([float(v) for v in values]).reshape(h, w))
