"""Composition of overlapping network channels into class encodings.

The network emits ``N-1`` sigmoid channels ``psi``. Each output class is a
product of factors ``psi_k`` or ``1 - psi_k``. For the cardiac layout::

    phi_1 = psi_1                      (LV)
    phi_2 = psi_2 * (1 - psi_1)        (Myo, the LV+Myo disk minus LV)
    phi_3 = psi_3                      (RV)
    phi_4 = (1 - psi_2) * (1 - psi_3)  (background)

Rules are written with signed, 1-based channel indices: ``+k`` stands for
``psi_k`` and ``-k`` for ``1 - psi_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MaskMapSpec", "apply_mapping", "mapping_backward", "CARDIAC", "BINARY"]


@dataclass(frozen=True)
class MaskMapSpec:
    n_channels: int
    rules: tuple[tuple[int, ...], ...]
    # (inner, outer) 1-based pairs that inclusion regularization ties together
    inclusions: tuple[tuple[int, int], ...] = ()
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if not self.rules:
            raise ValueError("at least one class rule is required")
        for rule in self.rules:
            for term in rule:
                if term == 0 or abs(term) > self.n_channels:
                    raise ValueError(f"rule {rule} references invalid channel {term}")
            if len({abs(t) for t in rule}) != len(rule):
                raise ValueError(f"rule {rule} uses a channel twice")
        for inner, outer in self.inclusions:
            if not (1 <= inner <= self.n_channels and 1 <= outer <= self.n_channels):
                raise ValueError(f"inclusion ({inner}, {outer}) out of range")
        if self.class_names and len(self.class_names) != len(self.rules):
            raise ValueError("class_names must match the number of rules")

    @property
    def n_classes(self):
        return len(self.rules)

    @classmethod
    def cardiac(cls):
        return cls(
            n_channels=3,
            rules=((1,), (2, -1), (3,), (-2, -3)),
            inclusions=((1, 2),),
            class_names=("LV", "Myo", "RV", "background"),
        )

    @classmethod
    def binary(cls):
        """Classical two-phase split: foreground ``psi_1`` against ``1 - psi_1``."""
        return cls(n_channels=1, rules=((1,), (-1,)), class_names=("foreground", "background"))

    @classmethod
    def parse(cls, text, inclusions=""):
        """Parse ``"1; 2,-1; 3; -2,-3"`` style rule tables."""
        rules = []
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            rules.append(tuple(int(t) for t in chunk.replace(",", " ").split()))
        n_channels = max(abs(t) for rule in rules for t in rule)
        incl = []
        for chunk in inclusions.split(";"):
            if chunk.strip():
                a, b = (int(t) for t in chunk.replace(",", " ").split())
                incl.append((a, b))
        return cls(n_channels=n_channels, rules=tuple(rules), inclusions=tuple(incl))

    def format(self):
        return "; ".join(",".join(str(t) for t in rule) for rule in self.rules)


CARDIAC = MaskMapSpec.cardiac()
BINARY = MaskMapSpec.binary()


def _check_psi(psi, spec):
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim != 3 or psi.shape[0] != spec.n_channels:
        raise ValueError(
            f"expected psi of shape ({spec.n_channels}, H, W), got {psi.shape}")
    return psi


def _factor(psi, term):
    k = abs(term) - 1
    return psi[k] if term > 0 else 1.0 - psi[k]


def apply_mapping(psi, spec=CARDIAC):
    """Map a ``(N-1, H, W)`` psi stack to the ``(N, H, W)`` phi stack."""
    psi = _check_psi(psi, spec)
    phi = np.ones((spec.n_classes,) + psi.shape[1:])
    for n, rule in enumerate(spec.rules):
        for term in rule:
            phi[n] *= _factor(psi, term)
    return phi


def mapping_backward(psi, dphi, spec=CARDIAC):
    """Pull gradients on phi back to psi through the product rules."""
    psi = _check_psi(psi, spec)
    dphi = np.asarray(dphi, dtype=np.float64)
    if dphi.shape != (spec.n_classes,) + psi.shape[1:]:
        raise ValueError(f"dphi shape {dphi.shape} does not match the mapping output")
    dpsi = np.zeros_like(psi)
    for n, rule in enumerate(spec.rules):
        for term in rule:
            # product of the other factors; avoids dividing by a vanishing factor
            others = np.ones(psi.shape[1:])
            for t in rule:
                if t != term:
                    others = others * _factor(psi, t)
            sign = 1.0 if term > 0 else -1.0
            dpsi[abs(term) - 1] += sign * others * dphi[n]
    return dpsi
