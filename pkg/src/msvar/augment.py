"""Random grid-exact transforms and their inverses for consistency training."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TransformDescriptor",
    "IDENTITY",
    "sample_transform",
    "apply",
    "apply_spatial",
    "pull_back",
]

SCALE_RANGE = (0.8, 1.2)
SHIFT_RANGE = (-0.1, 0.1)


@dataclass(frozen=True)
class TransformDescriptor:
    rotation: int = 0  # degrees, multiple of 90
    flip_h: bool = False
    flip_v: bool = False
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError(f"rotation must be a multiple of 90 in [0, 270], got {self.rotation}")

    def token(self):
        parts = [f"r{self.rotation}"]
        if self.flip_h:
            parts.append("fh")
        if self.flip_v:
            parts.append("fv")
        parts.append(f"s{self.intensity_scale!r}")
        parts.append(f"o{self.intensity_shift!r}")
        return ".".join(parts)

    @classmethod
    def from_token(cls, token):
        m = _TOKEN.match(token)
        if m is None:
            raise ValueError(f"malformed transform token {token!r}")
        rot, fh, fv, scale, shift = m.groups()
        return cls(int(rot), fh is not None, fv is not None, float(scale), float(shift))


_TOKEN = re.compile(r"^r(\d+)(\.fh)?(\.fv)?\.s([-+0-9.eE]+?)\.o([-+0-9.eE]+)$")

IDENTITY = TransformDescriptor()


def sample_transform(seed):
    """Draw a transform; ``seed`` may be an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rotation = 90 * int(rng.integers(4))
    flip_h, flip_v = (bool(b) for b in rng.integers(2, size=2))
    scale = float(rng.uniform(*SCALE_RANGE))
    shift = float(rng.uniform(*SHIFT_RANGE))
    return TransformDescriptor(rotation, flip_h, flip_v, scale, shift)


def apply_spatial(t, x):
    """Rotate then flip the last two axes of ``x``; no interpolation."""
    x = np.rot90(np.asarray(x), t.rotation // 90, axes=(-2, -1))
    if t.flip_h:
        x = x[..., :, ::-1]
    if t.flip_v:
        x = x[..., ::-1, :]
    return np.ascontiguousarray(x)


def apply(t, image):
    """Spatial transform followed by the intensity affine, clipped to [0, 1]."""
    out = apply_spatial(t, image) * t.intensity_scale + t.intensity_shift
    return np.clip(out, 0.0, 1.0)


def pull_back(t, pred):
    """Exact inverse of the spatial part, channel-wise over a stack."""
    x = np.asarray(pred)
    if t.flip_v:
        x = x[..., ::-1, :]
    if t.flip_h:
        x = x[..., :, ::-1]
    return np.ascontiguousarray(np.rot90(x, -(t.rotation // 90), axes=(-2, -1)))
