"""Evaluation reports and label overlays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import segmenter
from .energies import class_intensities
from .maskmap import CARDIAC, MaskMapSpec
from .metrics import dice_per_class, histogram_distance
from .synth import (
    N_CLASSES,
    PositionClassifier,
    SynthConfig,
    generate_pair,
    index_from_labels,
    item_seed,
    labels_from_index,
)

__all__ = ["EvalReport", "evaluate", "evaluate_labels", "overlay", "PALETTE",
           "class_homogeneity", "fit_position_classifier"]

# red, green, blue, yellow, then extra colors for larger mappings
PALETTE = np.array([
    (230, 25, 25), (25, 200, 60), (40, 90, 230), (240, 220, 30),
    (200, 40, 200), (30, 210, 210), (245, 130, 40), (130, 130, 130),
], dtype=np.float64)


def overlay(image, labels, alpha=0.5, palette=PALETTE):
    """RGB uint8 rendering of ``labels`` blended over the gray ``image``."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    labels = np.asarray(labels)
    if labels.shape != image.shape:
        raise ValueError(f"shape mismatch: {labels.shape} vs {image.shape}")
    gray = np.repeat(image[..., None] * 255.0, 3, axis=-1)
    colors = palette[labels % len(palette)]
    return np.rint((1.0 - alpha) * gray + alpha * colors).astype(np.uint8)


def class_homogeneity(image, labels):
    """Per-class share of the intensity-constraint value: for each class the
    squared deviation from the class mean, summed over the class and divided
    by the pixel count. The shares add up to the constraint value."""
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    c = class_intensities(image, np.ones_like(image), labels).c
    resid = (image[None] - c[:, None, None]) ** 2 * labels
    return resid.sum(axis=(1, 2)) / image.size


def fit_position_classifier(size, seed, n_pairs=500):
    pairs = [generate_pair(SynthConfig(size=size), item_seed(seed, "labeled", 10_000 + i))
             for i in range(n_pairs)]
    return PositionClassifier().fit(pairs)


@dataclass
class EvalReport:
    """Scores of a label predictor on a test split.

    Dice statistics are taken over test images (one score per image and
    class). ``mean_dice`` averages the foreground classes.
    """

    class_names: tuple
    dice: np.ndarray
    dice_std: np.ndarray
    mean_dice: float
    homogeneity: np.ndarray
    histogram_distance: float
    position_accuracy: float
    n_images: int
    per_image: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        out = {"n_images": self.n_images, "grouping": "per test image"}
        for name, d, s, h in zip(self.class_names, self.dice, self.dice_std, self.homogeneity):
            out[f"dice_{name}"] = float(d)
            out[f"dice_std_{name}"] = float(s)
            out[f"homogeneity_{name}"] = float(h)
        out["mean_dice"] = float(self.mean_dice)
        out["histogram_distance"] = float(self.histogram_distance)
        out["position_accuracy"] = float(self.position_accuracy)
        return out

    def to_keyvalue(self):
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def to_text(self):
        lines = [f"{self.n_images} test images; Dice mean +- std over images", ""]
        lines.append(f"{'class':<12}{'dice':>8}{'std':>8}{'homog.':>11}")
        for name, d, s, h in zip(self.class_names, self.dice, self.dice_std, self.homogeneity):
            lines.append(f"{name:<12}{d:8.4f}{s:8.4f}{h:11.3e}")
        lines += [
            "",
            f"mean foreground Dice  {self.mean_dice:.4f}",
            f"histogram distance    {self.histogram_distance:.4f}  (synthetic vs test images)",
            f"position accuracy     {self.position_accuracy:.4f}",
        ]
        return "\n".join(lines) + "\n"


def evaluate_labels(predictions, bundle, spec: MaskMapSpec = CARDIAC, classifier=None):
    """Build an :class:`EvalReport` from predicted label maps of ``bundle.test``."""
    test = bundle.test
    if len(predictions) != len(test):
        raise ValueError("one prediction per test item is required")
    if not test:
        raise ValueError("the test split is empty")
    n = spec.n_classes
    if n != N_CLASSES:
        raise ValueError(f"mapping has {n} classes but the data has {N_CLASSES}")
    per_image = []
    homog = []
    for pred, item in zip(predictions, test):
        if item.labels is None:
            raise ValueError("test items need labels")
        per_image.append(dice_per_class(pred, index_from_labels(item.labels), n))
        homog.append(class_homogeneity(item.image, item.labels))
    per_image = np.array(per_image)
    fg = [k for k, name in enumerate(spec.class_names or range(n)) if name != "background"]
    if classifier is None:
        classifier = fit_position_classifier(test[0].image.shape[-1], bundle.seed)
    acc = float(np.mean([classifier.predict(labels_from_index(p, n)) == item.position_class
                         for p, item in zip(predictions, test)]))
    reference = bundle.labeled or bundle.unlabeled
    hist = histogram_distance([p.image for p in reference], [t.image for t in test]) \
        if reference else float("nan")
    names = spec.class_names or tuple(str(k) for k in range(n))
    return EvalReport(
        class_names=tuple(names),
        dice=per_image.mean(axis=0),
        dice_std=per_image.std(axis=0),
        mean_dice=float(per_image[:, fg].mean()),
        homogeneity=np.mean(homog, axis=0),
        histogram_distance=hist,
        position_accuracy=acc,
        n_images=len(test),
        per_image=per_image,
    )


def evaluate(model: segmenter.SegModel, bundle, spec: MaskMapSpec = CARDIAC, classifier=None):
    """Predict every test image with ``model`` and score the result."""
    if model.n_psi != spec.n_channels:
        raise ValueError(f"checkpoint has {model.n_psi} mask channels, "
                         f"the mapping needs {spec.n_channels}")
    preds = [segmenter.predict(model, item.image, spec)[1] for item in bundle.test]
    return evaluate_labels(preds, bundle, spec, classifier)
