"""Parametric label-to-image synthesis and phantom datasets.

Label maps are drawn from geometry presets indexed by a slice-position class
(0 = apex ... 4 = base). Images are painted with per-class intensities, multiplied by
a smooth polynomial bias field, corrupted with Gaussian noise and clipped to
[0, 1]. Class order throughout is (LV, Myo, RV, background).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .energies import spatial_constraint
from .fields import read_pgm, write_pgm
from .maskmap import CARDIAC, apply_mapping

__all__ = [
    "LV", "MYO", "RV", "BG", "N_CLASSES", "N_POSITIONS",
    "GenerationError",
    "SynthConfig",
    "LabeledPair",
    "DatasetBundle",
    "generate_pair",
    "generate_confusable_phantom",
    "generate_two_region_phantom",
    "bias_field",
    "psi_from_labels",
    "labels_from_index",
    "index_from_labels",
    "position_features",
    "PositionClassifier",
    "item_seed",
    "dataset",
    "save_dataset",
    "load_dataset",
    "check_mapping_consistency",
]

LV, MYO, RV, BG = range(4)
N_CLASSES = 4
N_POSITIONS = 5


class GenerationError(ValueError):
    """Raised when the requested geometry does not fit on the canvas."""


@dataclass(frozen=True)
class SynthConfig:
    size: int = 32
    geometry: str = "cardiac"  # or "shapes"
    # per-class (low, high) ranges in class order LV, Myo, RV, background
    intensity_ranges: tuple = ((0.85, 0.95), (0.5, 0.6), (0.25, 0.35), (0.03, 0.13))
    bias_amplitude: float = 0.3
    noise_sigma: float = 0.02
    rv_absent_prob: float = 0.5  # at the apical position only
    confusable: bool = False  # RV shares the LV intensity draw

    def __post_init__(self):
        if self.geometry not in ("cardiac", "shapes"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if len(self.intensity_ranges) != N_CLASSES:
            raise ValueError("intensity_ranges needs one (low, high) pair per class")
        for lo, hi in self.intensity_ranges:
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"invalid intensity range ({lo}, {hi})")
        if not 0.0 <= self.bias_amplitude <= 0.9:
            raise ValueError("bias_amplitude must lie in [0, 0.9]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.size < 8:
            raise GenerationError(f"canvas of size {self.size} is too small")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def spread_scaled(self, factor):
        """Copy with every intensity range widened about its centre."""
        ranges = []
        for lo, hi in self.intensity_ranges:
            mid, half = (lo + hi) / 2, (hi - lo) / 2 * factor
            ranges.append((max(0.0, mid - half), min(1.0, mid + half)))
        return self.replace(intensity_ranges=tuple(ranges))


@dataclass
class LabeledPair:
    image: np.ndarray
    labels: Optional[np.ndarray]  # (4, H, W) binary; None once discarded
    position_class: int
    provenance: dict = field(default_factory=dict)


def bias_field(rng, shape, amplitude):
    """Degree-2 bivariate polynomial rescaled to ``[1 - a, 1 + a]``."""
    h, w = shape
    if amplitude == 0:
        return np.ones(shape), np.zeros(6)
    y, x = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    coef = rng.uniform(-1.0, 1.0, size=6)
    poly = (coef[0] + coef[1] * x + coef[2] * y + coef[3] * x * x
            + coef[4] * x * y + coef[5] * y * y)
    lo, hi = poly.min(), poly.max()
    if hi - lo < 1e-12:
        return np.ones(shape), coef
    return 1.0 - amplitude + 2.0 * amplitude * (poly - lo) / (hi - lo), coef


def _disk(shape, cy, cx, r):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _square(shape, cy, cx, half):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)


def _inside(mask):
    # one-pixel margin keeps every structure off the canvas border
    return not (mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def _cardiac_geometry(rng, size, position, rv_absent_prob):
    s = size / 64.0
    shape = (size, size)
    r_lv = s * (3.0 + 1.2 * position + rng.uniform(-0.3, 0.3))
    r_out = r_lv * 1.55 + s * rng.uniform(-0.25, 0.25)
    cy = size / 2 + rng.uniform(-4, 4) * s
    cx = size / 2 + 4.0 * s + rng.uniform(-4, 4) * s
    rv_present = not (position == 0 and rng.uniform() < rv_absent_prob)
    angle = np.pi + rng.uniform(-0.5, 0.5)
    # RV crescent: a disk as wide as the epicardium, offset so the crescent
    # is a fraction of the epicardial radius thick
    r_rv = r_out * (1.0 + rng.uniform(-0.05, 0.05))
    thick = r_out * (0.4 + 0.03 * position)
    dist = r_out + thick - r_rv
    lv = _disk(shape, cy, cx, r_lv)
    ring = _disk(shape, cy, cx, r_out)
    if rv_present:
        rv = _disk(shape, cy + dist * np.sin(angle), cx + dist * np.cos(angle), r_rv) & ~ring
    else:
        rv = np.zeros(shape, bool)
    if not (_inside(ring) and _inside(rv)) or not lv.any():
        raise GenerationError(f"cardiac geometry does not fit a {size}x{size} canvas")
    geom = {"r_lv": r_lv, "r_out": r_out, "center": (cy, cx), "rv_present": rv_present}
    return lv, ring & ~lv, rv, geom


def _shapes_geometry(rng, size, position, rv_absent_prob):
    """A circle inside a square plus a separate circle or square."""
    s = size / 64.0
    shape = (size, size)
    half = s * (7.0 + 1.5 * position + rng.uniform(-0.5, 0.5))
    r_in = half * rng.uniform(0.45, 0.6)
    rv_present = not (position == 0 and rng.uniform() < rv_absent_prob)
    r_rv = s * (4.0 + 1.2 * position + rng.uniform(-0.5, 0.5))
    for _ in range(200):
        cy, cx = rng.uniform(half + 1, size - half - 2, size=2)
        sq = _square(shape, cy, cx, half)
        lv = _disk(shape, cy, cx, r_in)
        if not rv_present:
            rv = np.zeros(shape, bool)
            break
        ry, rx = rng.uniform(r_rv + 1, size - r_rv - 2, size=2)
        rv = _disk(shape, ry, rx, r_rv) if rng.uniform() < 0.5 else _square(shape, ry, rx, r_rv)
        gap = _disk(shape, ry, rx, r_rv + 1.5) if rv.sum() else rv
        if not (gap & sq).any():
            break
    else:
        raise GenerationError(f"shapes geometry does not fit a {size}x{size} canvas")
    if not (_inside(sq) and _inside(rv)) or not lv.any():
        raise GenerationError(f"shapes geometry does not fit a {size}x{size} canvas")
    geom = {"half": half, "r_in": r_in, "rv_present": rv_present}
    return lv, sq & ~lv, rv, geom


def _paint(rng, cfg, lv, myo, rv, position, seed, geom, kind):
    shape = lv.shape
    labels = np.zeros((N_CLASSES,) + shape)
    labels[LV], labels[MYO], labels[RV] = lv, myo, rv
    labels[BG] = 1.0 - labels[:3].sum(axis=0)
    intensities = np.array([rng.uniform(lo, hi) for lo, hi in cfg.intensity_ranges])
    if cfg.confusable:
        intensities[RV] = intensities[LV]
    clean = np.einsum("n,nij->ij", intensities, labels)
    bias, coef = bias_field(rng, shape, cfg.bias_amplitude)
    noise = rng.normal(0.0, cfg.noise_sigma, size=shape) if cfg.noise_sigma > 0 else 0.0
    image = np.clip(clean * bias + noise, 0.0, 1.0)
    provenance = {
        "kind": kind,
        "seed": seed,
        "intensities": intensities.tolist(),
        "bias_coefficients": coef.tolist(),
        "bias_amplitude": cfg.bias_amplitude,
        "noise_sigma": cfg.noise_sigma,
        "geometry": cfg.geometry,
        **geom,
    }
    return LabeledPair(image, labels, position, provenance)


def generate_pair(cfg: SynthConfig, seed, position=None, kind="synthetic"):
    """Draw a label map for a position class and synthesize its image.

    ``position`` defaults to a uniform draw over the five classes.
    """
    rng = np.random.default_rng(seed)
    if position is None:
        position = int(rng.integers(N_POSITIONS))
    if not 0 <= position < N_POSITIONS:
        raise ValueError(f"position class {position} out of range")
    draw = _cardiac_geometry if cfg.geometry == "cardiac" else _shapes_geometry
    lv, myo, rv, geom = draw(rng, cfg.size, position, cfg.rv_absent_prob)
    return _paint(rng, cfg, lv, myo, rv, position, seed, geom, kind)


def generate_confusable_phantom(cfg: SynthConfig, seed, position=None):
    """Phantom whose LV and RV analogues share one intensity draw."""
    return generate_pair(cfg.replace(confusable=True), seed, position, kind="confusable")


def generate_two_region_phantom(size, seed, low=0.2, high=0.8, noise_sigma=0.0):
    """Background at ``low`` with one disk at ``high``; returns (image, mask)."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.18, 0.3) * size
    cy, cx = rng.uniform(r + 2, size - r - 2, size=2)
    mask = _disk((size, size), cy, cx, r)
    image = np.where(mask, high, low)
    if noise_sigma > 0:
        image = np.clip(image + rng.normal(0, noise_sigma, image.shape), 0, 1)
    return image, mask


def psi_from_labels(labels):
    """Network-channel targets implied by a label stack: (LV, LV+Myo, RV)."""
    labels = np.asarray(labels)
    return np.stack([labels[LV], labels[LV] + labels[MYO], labels[RV]])


def labels_from_index(index, n_classes=N_CLASSES):
    index = np.asarray(index).astype(int)
    return (index[None] == np.arange(n_classes)[:, None, None]).astype(np.float64)


def index_from_labels(labels):
    return np.argmax(np.asarray(labels), axis=0)


# --- position classifier -------------------------------------------------


def position_features(labels):
    """Size and layout features of a label stack.

    Square-rooted areas (so they scale like radii), RV presence, and the
    LV-to-RV centroid distance, all relative to the canvas size.
    """
    labels = np.asarray(labels, dtype=np.float64)
    size = labels.shape[-1]
    areas = labels[:3].sum(axis=(1, 2))
    yy, xx = np.mgrid[0:labels.shape[1], 0:labels.shape[2]]

    def centroid(m):
        tot = m.sum()
        return np.array([(m * yy).sum() / tot, (m * xx).sum() / tot]) if tot > 0 else None

    c_lv, c_rv = centroid(labels[LV]), centroid(labels[RV])
    dist = np.linalg.norm(c_lv - c_rv) / size if c_lv is not None and c_rv is not None else 0.0
    return np.concatenate([
        np.sqrt(areas) / size,
        [np.sqrt(areas[0] + areas[1]) / size, float(areas[2] > 0), dist],
    ])


class PositionClassifier:
    """Multinomial logistic regression from label features to position class."""

    def __init__(self, n_features=6, n_classes=N_POSITIONS):
        self.weights = np.zeros((n_classes, n_features))
        self.bias = np.zeros(n_classes)
        self.mean = np.zeros(n_features)
        self.scale = np.ones(n_features)

    def _logits(self, feats):
        return ((feats - self.mean) / self.scale) @ self.weights.T + self.bias

    def predict_proba(self, labels):
        z = self._logits(position_features(labels))
        z = z - z.max()
        p = np.exp(z)
        return p / p.sum()

    def predict(self, labels):
        return int(np.argmax(self.predict_proba(labels)))

    def fit(self, pairs, iters=3000, lr=0.5, l2=1e-4):
        """Full-batch gradient descent on the mean position cross-entropy."""
        feats = np.array([position_features(p.labels) for p in pairs])
        y = np.array([p.position_class for p in pairs])
        self.mean = feats.mean(axis=0)
        self.scale = np.where(feats.std(axis=0) > 1e-12, feats.std(axis=0), 1.0)
        x = (feats - self.mean) / self.scale
        n = len(y)
        for _ in range(iters):
            z = x @ self.weights.T + self.bias
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            # row-wise gradient of spatial_constraint with respect to the logits
            g = p.copy()
            g[np.arange(n), y] -= 1.0
            self.weights -= lr * (g.T @ x / n + l2 * self.weights)
            self.bias -= lr * g.mean(axis=0)
        return self

    def loss(self, pairs):
        return float(np.mean([spatial_constraint(p.position_class,
                                                 self.predict_proba(p.labels)).value
                              for p in pairs]))

    def accuracy(self, pairs):
        return float(np.mean([self.predict(p.labels) == p.position_class for p in pairs]))


# --- datasets ------------------------------------------------------------

SPLITS = ("labeled", "unlabeled", "test")


def item_seed(master, split, index):
    """Independent 32-bit seed for item ``index`` of ``split``."""
    ss = np.random.SeedSequence([int(master), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1)[0])


@dataclass
class DatasetBundle:
    labeled: list
    unlabeled: list
    test: list
    config: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0

    def sizes(self):
        return len(self.labeled), len(self.unlabeled), len(self.test)


def dataset(cfg: SynthConfig = SynthConfig(), n_labeled=10, n_unlabeled=15, n_test=10,
            seed=0, target_cfg: Optional[SynthConfig] = None):
    """Labeled synthetic pairs plus unlabeled and test target images.

    Synthetic pairs come from ``cfg``; target images come from ``target_cfg``
    (``cfg`` with confusable LV/RV intensities when omitted). Unlabeled items
    have their labels dropped.
    """
    for n in (n_labeled, n_unlabeled, n_test):
        if n < 0:
            raise ValueError("split counts must be >= 0")
    target = target_cfg if target_cfg is not None else cfg.replace(confusable=True)
    labeled = [generate_pair(cfg, item_seed(seed, "labeled", i)) for i in range(n_labeled)]
    unlabeled = []
    for i in range(n_unlabeled):
        p = generate_pair(target, item_seed(seed, "unlabeled", i), kind="target")
        p.labels = None
        unlabeled.append(p)
    test = [generate_pair(target, item_seed(seed, "test", i), kind="target")
            for i in range(n_test)]
    return DatasetBundle(labeled, unlabeled, test, cfg, seed)


MANIFEST = "manifest.txt"


def save_dataset(bundle: DatasetBundle, out_dir):
    """Write images (16-bit PGM), label maps (8-bit indexed PGM) and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# image\tlabels\tsplit\tposition\tseed"]
    for split in SPLITS:
        for i, item in enumerate(getattr(bundle, split)):
            img_name = f"{split}_{i:03d}_image.pgm"
            write_pgm(out / img_name, item.image, bits=16)
            lab_name = "-"
            if item.labels is not None:
                lab_name = f"{split}_{i:03d}_labels.pgm"
                write_pgm(out / lab_name, index_from_labels(item.labels), bits=8,
                          normalized=False)
            lines.append(f"{img_name}\t{lab_name}\t{split}\t{item.position_class}\t"
                         f"{item.provenance.get('seed', '-')}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out / MANIFEST


def load_dataset(path):
    """Read a directory written by :func:`save_dataset`."""
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise OSError(f"missing manifest: {manifest}")
    splits = {s: [] for s in SPLITS}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[2] not in SPLITS:
            raise ValueError(f"{manifest}:{lineno}: malformed manifest line")
        img_name, lab_name, split, position, seed = parts
        image = read_pgm(root / img_name)
        labels = None
        if lab_name != "-":
            index = read_pgm(root / lab_name, normalize=False)
            if index.shape != image.shape or index.max() >= N_CLASSES:
                raise ValueError(f"{lab_name}: label map does not match {img_name}")
            labels = labels_from_index(index)
        splits[split].append(LabeledPair(image, labels, int(position),
                                         {"seed": None if seed == "-" else int(seed),
                                          "file": img_name}))
    return DatasetBundle(splits["labeled"], splits["unlabeled"], splits["test"])


def check_mapping_consistency(labels):
    """True when the cardiac mapping of the implied channels reproduces ``labels``."""
    return bool(np.array_equal(apply_mapping(psi_from_labels(labels), CARDIAC), labels))
