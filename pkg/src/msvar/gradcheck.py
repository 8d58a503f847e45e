"""Central finite-difference verification of every analytic gradient.

Each check builds a seeded random instance, perturbs the differentiated
inputs one coordinate at a time and compares the numerical slope with the
analytic gradient. The error reported for a term is the largest, over its
gradient tensors, of ``|g_num - g_ana|_2 / max(|g_num|_2, |g_ana|_2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment, segmenter
from .energies import (
    LossWeights,
    SegItem,
    augmentation_invariance,
    inclusion_reg,
    intensity_constraint,
    ms_star,
    segmentation_loss,
    smooth_reg,
    soft_dice_loss,
    spatial_constraint,
    unsupervised_loss,
)
from .maskmap import CARDIAC, apply_mapping, mapping_backward

__all__ = ["CheckResult", "TERMS", "run_checks", "numeric_grad", "relative_error",
           "ENERGY_TOL", "MODEL_TOL"]

ENERGY_TOL = 1e-4
MODEL_TOL = 1e-3
SIZE = 8


@dataclass
class CheckResult:
    term: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.error <= self.tolerance)


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x``,
    which is perturbed in place and restored."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2.0 * h)
    return g


def relative_error(numeric, analytic):
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(numeric - analytic) / scale)


def _unit(rng, shape, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=shape)


def _check_ms_star(rng, corrupt):
    image, bias = _unit(rng, (SIZE, SIZE)), _unit(rng, (SIZE, SIZE), 0.5, 1.5)
    phi = _unit(rng, (4, SIZE, SIZE))
    c = rng.uniform(0.1, 1.0, size=4)
    rep = ms_star(image, bias, phi, c)
    value = lambda: ms_star(image, bias, phi, c).value  # noqa: E731
    return [(numeric_grad(value, phi), corrupt(rep.grad_phi)),
            (numeric_grad(value, bias), rep.grad_bias)]


def _check_inclusion(rng, corrupt):
    psi = _unit(rng, (2, SIZE, SIZE))
    rep = inclusion_reg(psi[0], psi[1])
    value = lambda: inclusion_reg(psi[0], psi[1]).value  # noqa: E731
    return [(numeric_grad(value, psi), corrupt(rep.grad_psi))]


def _check_smooth(rng, corrupt):
    phi = _unit(rng, (4, SIZE, SIZE))
    bias = _unit(rng, (SIZE, SIZE))
    rep = smooth_reg(phi, bias, bias_weight=0.7)
    value = lambda: smooth_reg(phi, bias, bias_weight=0.7).value  # noqa: E731
    return [(numeric_grad(value, phi), corrupt(rep.grad_phi)),
            (numeric_grad(value, bias), rep.grad_bias)]


def _check_mapping(rng, corrupt):
    psi = _unit(rng, (3, SIZE, SIZE))
    dphi = rng.normal(size=(4, SIZE, SIZE))
    value = lambda: float(np.sum(apply_mapping(psi, CARDIAC) * dphi))  # noqa: E731
    return [(numeric_grad(value, psi), corrupt(mapping_backward(psi, dphi, CARDIAC)))]


def _check_intensity(rng, corrupt):
    image = _unit(rng, (SIZE, SIZE))
    idx = rng.integers(4, size=(SIZE, SIZE))
    labels = (np.arange(4)[:, None, None] == idx).astype(np.float64)
    rep = intensity_constraint(image, labels)
    value = lambda: intensity_constraint(image, labels).value  # noqa: E731
    return [(numeric_grad(value, image), corrupt(rep.grad_image))]


def _check_spatial(rng, corrupt):
    logits = rng.normal(size=5)
    target = int(rng.integers(5))

    def probs():
        e = np.exp(logits - logits.max())
        return e / e.sum()

    rep = spatial_constraint(target, probs())
    value = lambda: spatial_constraint(target, probs()).value  # noqa: E731
    return [(numeric_grad(value, logits), corrupt(rep.grad_logits))]


def _check_augmentation(rng, corrupt):
    a, b = _unit(rng, (3, SIZE, SIZE)), _unit(rng, (3, SIZE, SIZE))
    rep = augmentation_invariance(a, b)
    value = lambda: augmentation_invariance(a, b).value  # noqa: E731
    return [(numeric_grad(value, a), corrupt(rep.grad_psi)),
            (numeric_grad(value, b), -rep.grad_psi)]


def _check_dice(rng, corrupt):
    pred = _unit(rng, (4, SIZE, SIZE))
    idx = rng.integers(4, size=(SIZE, SIZE))
    target = (np.arange(4)[:, None, None] == idx).astype(np.float64)
    rep = soft_dice_loss(pred, target)
    value = lambda: soft_dice_loss(pred, target).value  # noqa: E731
    return [(numeric_grad(value, pred), corrupt(rep.grad_phi))]


def _check_unsupervised(rng, corrupt):
    image = _unit(rng, (SIZE, SIZE))
    psi = _unit(rng, (3, SIZE, SIZE))
    bias = _unit(rng, (SIZE, SIZE))
    c = rng.uniform(0.1, 1.0, size=4)
    w = LossWeights(eta=0.8, epsilon=0.05, bias_smooth=0.5)
    rep = unsupervised_loss(image, psi, bias, CARDIAC, w, c=c)
    value = lambda: unsupervised_loss(image, psi, bias, CARDIAC, w, c=c).value  # noqa: E731
    return [(numeric_grad(value, psi), corrupt(rep.grad_psi)),
            (numeric_grad(value, bias), rep.grad_bias)]


def _seg_items(rng):
    items = []
    for k in range(2):
        image = _unit(rng, (SIZE, SIZE))
        idx = rng.integers(4, size=(SIZE, SIZE))
        label = (np.arange(4)[:, None, None] == idx).astype(np.float64) if k == 0 else None
        items.append(SegItem(image, _unit(rng, (3, SIZE, SIZE)), _unit(rng, (SIZE, SIZE)),
                             label, _unit(rng, (3, SIZE, SIZE)), augment.sample_transform(rng)))
    return items


def _check_segmentation(rng, corrupt):
    items = _seg_items(rng)
    # the closed-form class intensities depend on psi; the least-squares form
    # is stationary in c, so finite differences see only the explicit terms
    w = LossWeights(alpha=1.0, beta=0.5, gamma=0.3, eta=0.8, epsilon=0.05, bias_smooth=0.5)
    value = lambda: segmentation_loss(items, w, CARDIAC, "lsq").value  # noqa: E731
    grads = segmentation_loss(items, w, CARDIAC, "lsq").grad_psi
    pairs = []
    for k, item in enumerate(items):
        g = grads[k]
        pairs.append((numeric_grad(value, item.psi), corrupt(g.psi) if k == 0 else g.psi))
        pairs.append((numeric_grad(value, item.bias), g.bias))
        pairs.append((numeric_grad(value, item.psi_aug), g.psi_aug))
    return pairs


def _check_model(rng, corrupt):
    model = segmenter.SegModel(3, seed=int(rng.integers(2**31)))
    for k in ("seg_w", "seg_b", "bias_w", "bias_b"):
        model.params[k] = rng.normal(scale=0.5, size=model.params[k].shape)
    image = _unit(rng, (2, SIZE, SIZE))
    up_psi = rng.normal(size=(2, 3, SIZE, SIZE))
    up_bias = rng.normal(size=(2, SIZE, SIZE))

    def value():
        psi, bias, _ = segmenter.forward(model, image)
        return float(np.sum(psi * up_psi) + np.sum(bias * up_bias))

    _, _, cache = segmenter.forward(model, image)
    grads = segmenter.backward(model, cache, up_psi, up_bias)
    pairs = []
    for name, p in model.params.items():
        g = corrupt(grads[name]) if name == "conv1_w" else grads[name]
        pairs.append((numeric_grad(value, p, h=1e-5), g))
    return pairs


TERMS = {
    "ms_star": (_check_ms_star, ENERGY_TOL),
    "inclusion_reg": (_check_inclusion, ENERGY_TOL),
    "smooth_reg": (_check_smooth, ENERGY_TOL),
    "mapping_backward": (_check_mapping, ENERGY_TOL),
    "intensity_constraint": (_check_intensity, ENERGY_TOL),
    "spatial_constraint": (_check_spatial, ENERGY_TOL),
    "augmentation_invariance": (_check_augmentation, ENERGY_TOL),
    "soft_dice_loss": (_check_dice, ENERGY_TOL),
    "unsupervised_loss": (_check_unsupervised, ENERGY_TOL),
    "segmentation_loss": (_check_segmentation, ENERGY_TOL),
    "segmenter": (_check_model, MODEL_TOL),
}


def run_checks(terms=None, seed=0, corrupt=()):
    """Run the named checks (all by default) and return :class:`CheckResult` s.

    ``corrupt`` names terms whose analytic gradient is deliberately perturbed,
    a hook for testing that the harness reports failures.
    """
    names = list(TERMS) if not terms else list(terms)
    unknown = [t for t in names if t not in TERMS]
    if unknown:
        raise KeyError(f"unknown gradient term(s): {', '.join(unknown)}")
    results = []
    for name in names:
        check, tol = TERMS[name]
        rng = np.random.default_rng([int(seed), list(TERMS).index(name)])
        bad = name in corrupt
        pairs = check(rng, (lambda g: g * 1.01 + 1e-3) if bad else (lambda g: g))
        err = max(relative_error(n, a) for n, a in pairs)
        results.append(CheckResult(name, err, tol))
    return results
