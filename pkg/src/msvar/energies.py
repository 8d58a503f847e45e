"""Loss terms with analytic gradients.

Every function returns an :class:`EnergyReport` carrying the scalar value and
the gradients relevant to the term. Region terms are averaged over pixels;
total variation terms are plain sums over the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .fields import DEFAULT_TV_EPS, DEGENERATE_SUPPORT, tv_value_and_grad
from .maskmap import CARDIAC, MaskMapSpec, apply_mapping, mapping_backward

__all__ = [
    "EnergyReport",
    "ClassIntensities",
    "LossWeights",
    "SegItem",
    "class_intensities",
    "ms_star",
    "inclusion_reg",
    "smooth_reg",
    "intensity_constraint",
    "spatial_constraint",
    "augmentation_invariance",
    "soft_dice_loss",
    "unsupervised_loss",
    "generator_loss",
    "segmentation_loss",
]

LOG_CLAMP = 1e-12
DICE_SMOOTH = 1e-6


@dataclass
class EnergyReport:
    value: float
    grad_phi: Optional[np.ndarray] = None
    grad_psi: Optional[np.ndarray] = None
    grad_bias: Optional[np.ndarray] = None
    grad_image: Optional[np.ndarray] = None
    grad_logits: Optional[np.ndarray] = None
    degenerate_classes: tuple = ()
    components: dict = field(default_factory=dict)


class ClassIntensities(NamedTuple):
    c: np.ndarray
    degenerate: tuple


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objectives.

    ``eta`` and ``epsilon`` weight inclusion and smoothness inside the
    unsupervised loss; ``alpha``, ``beta`` and ``gamma`` weight the supervised,
    unsupervised and augmentation terms of the segmentation loss; ``mu`` and
    ``nu`` weight the generator's intensity and position terms.
    ``bias_smooth`` scales the bias field's share of the smoothness term.
    """

    alpha: float = 1.0
    beta: float = 1e-4
    gamma: float = 1e-3
    eta: float = 1.0
    epsilon: float = 1.0
    mu: float = 10.0
    nu: float = 10.0
    bias_smooth: float = 1.0

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"weight {name} must be finite and >= 0, got {val}")

    def with_(self, **kw):
        return replace(self, **kw)


def _same_shape(*arrays):
    shapes = {np.shape(a)[-2:] for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch between fields: {sorted(shapes)}")


def class_intensities(image, bias, phi, mode="mean"):
    """Per-class intensity representatives.

    ``mode="mean"`` (bias-weighted mean) computes ``sum(I*b*phi_n) / sum(b*phi_n)``;
    ``mode="lsq"`` computes the least-squares optimum
    ``sum(I*b*phi_n) / sum(b**2*phi_n)`` of the bias-corrected fit.
    Classes whose denominator falls below 1e-12 get 0 and are reported.
    """
    image = np.asarray(image, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    _same_shape(image, bias, phi)
    if mode not in ("mean", "lsq"):
        raise ValueError(f"unknown intensity mode {mode!r}")
    weight = bias if mode == "mean" else bias * bias
    den = np.einsum("nij,ij->n", phi, weight)
    if mode == "mean":
        # weighted mean taken relative to a pixel of each class, so constant
        # images give back their value exactly
        ref = image.ravel()[np.argmax(phi.reshape(len(phi), -1), axis=1)]
        num = np.einsum("nij,nij->n", phi, (image[None] - ref[:, None, None]) * bias)
    else:
        ref = np.zeros(len(phi))
        num = np.einsum("nij,ij->n", phi, image * bias)
    degenerate = tuple(int(n) for n in np.flatnonzero(den < DEGENERATE_SUPPORT))
    c = np.zeros(len(phi))
    ok = den >= DEGENERATE_SUPPORT
    c[ok] = ref[ok] + num[ok] / den[ok]
    return ClassIntensities(c, degenerate)


def ms_star(image, bias, phi, c):
    """Bias-corrected multi-class piecewise-constant fidelity.

    Value ``sum_n mean((I - b*c_n)**2 * phi_n)``; the class intensities are
    held fixed when differentiating.
    """
    image = np.asarray(image, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    c = np.asarray(getattr(c, "c", c), dtype=np.float64)
    _same_shape(image, bias, phi)
    if c.shape != (len(phi),):
        raise ValueError(f"expected {len(phi)} class intensities, got {c.shape}")
    npix = image.size
    resid = image[None] - bias[None] * c[:, None, None]
    sq = resid * resid
    value = float(np.sum(sq * phi)) / npix
    grad_phi = sq / npix
    grad_bias = np.sum(-2.0 * c[:, None, None] * resid * phi, axis=0) / npix
    return EnergyReport(value, grad_phi=grad_phi, grad_bias=grad_bias)


def inclusion_reg(psi1, psi2):
    """Mean of ``(psi1*psi2 - psi1)**2``; zero exactly when psi1 lies inside psi2."""
    psi1 = np.asarray(psi1, dtype=np.float64)
    psi2 = np.asarray(psi2, dtype=np.float64)
    if psi1.shape != psi2.shape:
        raise ValueError(f"shape mismatch: {psi1.shape} vs {psi2.shape}")
    d = psi1 * psi2 - psi1
    npix = psi1.size
    g1 = 2.0 * d * (psi2 - 1.0) / npix
    g2 = 2.0 * d * psi1 / npix
    return EnergyReport(float(np.sum(d * d)) / npix, grad_psi=np.stack([g1, g2]))


def smooth_reg(phi, bias, eps=DEFAULT_TV_EPS, bias_weight=1.0, bias_eps=None):
    """Total variation of every class channel plus (weighted) that of the bias.

    ``bias_eps`` sets a separate smoothing constant for the bias term; a large
    value makes it quadratic for the gentle slopes a bias field has.
    """
    phi = np.asarray(phi, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _same_shape(phi, bias)
    v_phi, g_phi = tv_value_and_grad(phi, eps)
    v_b, g_b = tv_value_and_grad(bias, eps if bias_eps is None else bias_eps)
    return EnergyReport(
        v_phi + bias_weight * v_b,
        grad_phi=g_phi,
        grad_bias=bias_weight * g_b,
        components={"tv_phi": v_phi, "tv_bias": v_b},
    )


def _check_binary_labels(labels):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 3:
        raise ValueError("labels must be a (N, H, W) stack")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    if np.any(labels.sum(axis=0) > 1):
        raise ValueError("labels overlap")
    return labels


def intensity_constraint(image_syn, labels):
    """Within-label intensity spread ``mean(sum_n (I - C_n)**2 * L_n)``.

    ``C_n`` is the label-restricted mean of the image (the class intensity
    with unit bias).
    """
    image = np.asarray(image_syn, dtype=np.float64)
    labels = _check_binary_labels(labels)
    _same_shape(image, labels)
    ci = class_intensities(image, np.ones_like(image), labels)
    resid = (image[None] - ci.c[:, None, None]) * labels
    npix = image.size
    value = float(np.sum(resid * resid)) / npix
    # the mean's own dependence on I cancels because residuals sum to zero
    grad = 2.0 * np.sum(resid, axis=0) / npix
    return EnergyReport(value, grad_image=grad, degenerate_classes=ci.degenerate,
                        components={"C": ci.c})


def spatial_constraint(y_true, y_hat):
    """Cross-entropy of the position prediction, log clamped at 1e-12.

    ``grad_logits`` is the gradient with respect to the softmax logits
    that produced ``y_hat``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.ndim != 1 or np.any(y_hat < 0) or abs(y_hat.sum() - 1.0) > 1e-6:
        raise ValueError("y_hat must be a probability vector")
    y_true = int(y_true)
    if not 0 <= y_true < len(y_hat):
        raise ValueError(f"position class {y_true} out of range")
    value = -float(np.log(max(y_hat[y_true], LOG_CLAMP)))
    grad = y_hat.copy()
    grad[y_true] -= 1.0
    return EnergyReport(value, grad_logits=grad)


def augmentation_invariance(pred, pred_aug_pulled_back):
    """Mean squared difference between a prediction and the pulled-back twin.

    ``grad_psi`` holds the gradient for ``pred``; the twin's gradient is its
    negative.
    """
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(pred_aug_pulled_back, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return EnergyReport(float(np.mean(d * d)), grad_psi=2.0 * d / d.size)


def soft_dice_loss(pred, target, smooth=DICE_SMOOTH):
    """``1 - mean_n (2*sum(p*q) + s) / (sum(p) + sum(q) + s)``."""
    p = np.asarray(pred, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 3:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    inter = np.einsum("nij,nij->n", p, q)
    denom = p.sum(axis=(1, 2)) + q.sum(axis=(1, 2)) + smooth
    dice = (2.0 * inter + smooth) / denom
    n = len(p)
    ddice = (2.0 * q * denom[:, None, None] - (2.0 * inter + smooth)[:, None, None]) \
        / (denom * denom)[:, None, None]
    return EnergyReport(1.0 - float(np.mean(dice)), grad_phi=-ddice / n,
                        components={"dice": dice})


def unsupervised_loss(image, psi, bias, spec: MaskMapSpec = CARDIAC,
                      weights: LossWeights = LossWeights(), c=None,
                      intensity_mode="mean", tv_eps=DEFAULT_TV_EPS, bias_tv_eps=None):
    """``ms_star + eta * inclusion_reg + epsilon * smooth_reg`` with gradients
    on psi and the bias field.

    When ``c`` is omitted the class intensities are computed from the current
    masks; either way they are treated as constants for differentiation.
    """
    image = np.asarray(image, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _same_shape(image, psi, bias)
    phi = apply_mapping(psi, spec)
    if c is None:
        ci = class_intensities(image, bias, phi, intensity_mode)
        c, degenerate = ci.c, ci.degenerate
    else:
        c, degenerate = np.asarray(getattr(c, "c", c), dtype=np.float64), ()

    ms = ms_star(image, bias, phi, c)
    value = ms.value
    grad_phi = ms.grad_phi.copy()
    grad_bias = ms.grad_bias.copy()
    grad_psi = np.zeros_like(psi)

    v_ir = 0.0
    if weights.eta > 0:
        for inner, outer in spec.inclusions:
            ir = inclusion_reg(psi[inner - 1], psi[outer - 1])
            v_ir += ir.value
            grad_psi[inner - 1] += weights.eta * ir.grad_psi[0]
            grad_psi[outer - 1] += weights.eta * ir.grad_psi[1]
    value += weights.eta * v_ir

    v_sm = 0.0
    if weights.epsilon > 0:
        sm = smooth_reg(phi, bias, tv_eps, weights.bias_smooth, bias_tv_eps)
        v_sm = sm.value
        grad_phi += weights.epsilon * sm.grad_phi
        grad_bias += weights.epsilon * sm.grad_bias
    value += weights.epsilon * v_sm

    grad_psi += mapping_backward(psi, grad_phi, spec)
    return EnergyReport(
        value,
        grad_phi=grad_phi,
        grad_psi=grad_psi,
        grad_bias=grad_bias,
        degenerate_classes=degenerate,
        components={"ms": ms.value, "ir": v_ir, "smooth": v_sm, "c": c},
    )


def generator_loss(pair, y_hat, weights: LossWeights = LossWeights()):
    """Generator objective with the adversarial part fixed at zero:
    ``mu * intensity_constraint + nu * spatial_constraint``."""
    ic = intensity_constraint(pair.image, pair.labels)
    sc = spatial_constraint(pair.position_class, y_hat)
    return EnergyReport(
        weights.mu * ic.value + weights.nu * sc.value,
        grad_image=weights.mu * ic.grad_image,
        grad_logits=weights.nu * sc.grad_logits,
        components={"ic": ic.value, "sc": sc.value},
    )


@dataclass
class SegItem:
    """One batch element as seen by :func:`segmentation_loss`.

    ``label`` is a binary phi stack for synthetic pairs and None for
    unlabeled images. ``psi_aug`` is the prediction on the augmented twin,
    ``transform`` the descriptor that produced it.
    """

    image: np.ndarray
    psi: np.ndarray
    bias: np.ndarray
    label: Optional[np.ndarray] = None
    psi_aug: Optional[np.ndarray] = None
    transform: object = None


@dataclass
class ItemGrads:
    psi: np.ndarray
    bias: np.ndarray
    psi_aug: Optional[np.ndarray] = None


def segmentation_loss(items, weights: LossWeights = LossWeights(),
                      spec: MaskMapSpec = CARDIAC, intensity_mode="mean"):
    """Batch mean of ``alpha*L_sup + beta*L_un + gamma*L_AI``.

    ``alpha`` is forced to zero for unlabeled items. ``components`` holds the
    weighted batch means of each term (they sum to ``value``) and
    ``grad_psi`` is a list of per-item :class:`ItemGrads`.
    """
    from . import augment

    if not items:
        raise ValueError("empty batch")
    n = len(items)
    sup = un = ai = 0.0
    grads = []
    for item in items:
        g_psi = np.zeros_like(item.psi)
        g_bias = np.zeros_like(item.bias)
        g_aug = None
        alpha = weights.alpha if item.label is not None else 0.0
        if alpha > 0:
            d = soft_dice_loss(apply_mapping(item.psi, spec), item.label)
            sup += alpha * d.value / n
            g_psi += alpha * mapping_backward(item.psi, d.grad_phi, spec) / n
        if weights.beta > 0:
            u = unsupervised_loss(item.image, item.psi, item.bias, spec, weights,
                                  intensity_mode=intensity_mode)
            un += weights.beta * u.value / n
            g_psi += weights.beta * u.grad_psi / n
            g_bias += weights.beta * u.grad_bias / n
        if weights.gamma > 0:
            if item.psi_aug is None or item.transform is None:
                raise ValueError("gamma > 0 requires an augmented twin for every item")
            back = augment.pull_back(item.transform, item.psi_aug)
            a = augmentation_invariance(item.psi, back)
            ai += weights.gamma * a.value / n
            g_psi += weights.gamma * a.grad_psi / n
            # pull_back is a pixel permutation; its adjoint is the forward transform
            g_aug = augment.apply_spatial(item.transform, -weights.gamma * a.grad_psi / n)
        grads.append(ItemGrads(g_psi, g_bias, g_aug))
    return EnergyReport(
        sup + un + ai,
        grad_psi=grads,
        components={"sup": sup, "un": un, "ai": ai},
    )
