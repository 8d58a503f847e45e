"""A shallow convolutional segmenter with hand-written backpropagation.

Two 3x3 convolutions with ReLU feed a sigmoid segmentation head (one channel
per mask channel) and a sigmoid bias head. Padding replicates edge pixels so
every layer keeps the input size. Training follows a supervised warm-up and
then mixed labeled/unlabeled batches under :func:`energies.segmentation_loss`.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment
from .energies import LossWeights, SegItem, segmentation_loss
from .maskmap import CARDIAC, MaskMapSpec, apply_mapping
from .variational import harden, sigmoid

__all__ = [
    "SegModel",
    "TrainConfig",
    "TrainingError",
    "Adam",
    "forward",
    "backward",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "load_training_state",
    "format_log",
    "MAGIC",
]

logger = logging.getLogger(__name__)

MAGIC = b"MSVAR1"
ARCH = "conv3x3-relu-conv3x3-relu-seg1x1-bias1x1"
WIDTH = 16


class TrainingError(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


class SegModel:
    """Parameters of the network, kept in a fixed declaration order.

    The convolution layers use He-scaled uniform initialization from ``seed``;
    both heads start at zero so a fresh model outputs 0.5 everywhere.
    """

    def __init__(self, n_psi=3, seed=0, width=WIDTH):
        if n_psi < 1 or width < 1:
            raise ValueError("n_psi and width must be >= 1")
        self.n_psi = int(n_psi)
        self.width = int(width)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)

        def he(shape, fan_in):
            bound = math.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        # Random (not zero) conv biases: with zero biases the ReLU stack is
        # positively homogeneous, so on flat regions every output is monotone
        # in intensity and mid-intensity classes cannot be represented at the
        # start of training.
        self.params = {
            "conv1_w": he((width, 1, 3, 3), 9),
            "conv1_b": he(width, 9),
            "conv2_w": he((width, width, 3, 3), 9 * width),
            "conv2_b": he(width, 9 * width),
            "seg_w": np.zeros((n_psi, width)),
            "seg_b": np.zeros(n_psi),
            "bias_w": np.zeros((1, width)),
            "bias_b": np.zeros(1),
        }
        # bumped on every in-place parameter change so stale caches are caught
        self.version = 0

    @property
    def names(self):
        return list(self.params)

    def copy(self):
        other = SegModel.__new__(SegModel)
        other.n_psi, other.width, other.seed = self.n_psi, self.width, self.seed
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.version = 0
        return other

    def touch(self):
        self.version += 1


@dataclass
class _Cache:
    version: int
    batched: bool
    cols1: np.ndarray
    h1: np.ndarray
    cols2: np.ndarray
    h2: np.ndarray
    psi: np.ndarray
    bias: np.ndarray
    shape: tuple


def _im2col(x):
    """(B, C, H, W) -> (B, C*9, H*W) patches with replicate padding."""
    b, c, h, w = x.shape
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    cols = np.stack([p[:, :, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)],
                    axis=2)
    return cols.reshape(b, c * 9, h * w)


def _col2im(dcols, shape):
    """Adjoint of :func:`_im2col`."""
    b, c, h, w = shape
    dcols = dcols.reshape(b, c, 9, h, w)
    dp = np.zeros((b, c, h + 2, w + 2))
    k = 0
    for dy in range(3):
        for dx in range(3):
            dp[:, :, dy:dy + h, dx:dx + w] += dcols[:, :, k]
            k += 1
    # replicated border pixels route their gradient back to the edge
    dp[:, :, 1, :] += dp[:, :, 0, :]
    dp[:, :, -2, :] += dp[:, :, -1, :]
    dp[:, :, :, 1] += dp[:, :, :, 0]
    dp[:, :, :, -2] += dp[:, :, :, -1]
    return dp[:, :, 1:-1, 1:-1]


def forward(model: SegModel, image):
    """Run the network on one image (H, W) or a batch (B, H, W).

    Returns ``(psi, bias, cache)`` with psi shaped (n_psi, H, W) or
    (B, n_psi, H, W) and bias shaped like the input.
    """
    x = np.asarray(image, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim not in (2, 3):
        raise ValueError("image must be (H, W) or (B, H, W)")
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ValueError(f"image must be at least 3x3, got {x.shape[-2:]}")
    if not batched:
        x = x[None]
    b, h, w = x.shape
    p = model.params
    width = model.width

    cols1 = _im2col(x[:, None])
    z1 = p["conv1_w"].reshape(width, -1) @ cols1 + p["conv1_b"][:, None]
    h1 = np.maximum(z1, 0.0)
    cols2 = _im2col(h1.reshape(b, width, h, w))
    z2 = p["conv2_w"].reshape(width, -1) @ cols2 + p["conv2_b"][:, None]
    h2 = np.maximum(z2, 0.0)
    psi = sigmoid(p["seg_w"] @ h2 + p["seg_b"][:, None]).reshape(b, model.n_psi, h, w)
    bias = sigmoid(p["bias_w"] @ h2 + p["bias_b"][:, None]).reshape(b, h, w)

    cache = _Cache(model.version, batched, cols1, h1, cols2, h2, psi, bias, (b, h, w))
    if batched:
        return psi, bias, cache
    return psi[0], bias[0], cache


def backward(model: SegModel, cache: _Cache, grad_psi, grad_bias):
    """Gradients of a scalar loss with respect to every parameter, given its
    gradients with respect to the two head outputs of :func:`forward`."""
    if cache.version != model.version:
        raise ValueError("cache is stale: the model changed after this forward pass")
    b, h, w = cache.shape
    width = model.width
    p = model.params
    g_psi = np.asarray(grad_psi, dtype=np.float64).reshape(b, model.n_psi, h * w)
    g_bias = np.asarray(grad_bias, dtype=np.float64).reshape(b, 1, h * w)

    psi = cache.psi.reshape(b, model.n_psi, h * w)
    bias = cache.bias.reshape(b, 1, h * w)
    dz_seg = g_psi * psi * (1.0 - psi)
    dz_bias = g_bias * bias * (1.0 - bias)
    h2 = cache.h2
    h2t = h2.transpose(0, 2, 1)
    grads = {
        "seg_w": (dz_seg @ h2t).sum(axis=0),
        "seg_b": dz_seg.sum(axis=(0, 2)),
        "bias_w": (dz_bias @ h2t).sum(axis=0),
        "bias_b": dz_bias.sum(axis=(0, 2)),
    }
    dh2 = p["seg_w"].T @ dz_seg + p["bias_w"].T @ dz_bias
    dz2 = dh2 * (h2 > 0)
    grads["conv2_w"] = (dz2 @ cache.cols2.transpose(0, 2, 1)).sum(axis=0).reshape(p["conv2_w"].shape)
    grads["conv2_b"] = dz2.sum(axis=(0, 2))
    dcols2 = p["conv2_w"].reshape(width, -1).T @ dz2
    dh1 = _col2im(dcols2, (b, width, h, w)).reshape(b, width, h * w)
    dz1 = dh1 * (cache.h1 > 0)
    grads["conv1_w"] = (dz1 @ cache.cols1.transpose(0, 2, 1)).sum(axis=0).reshape(p["conv1_w"].shape)
    grads["conv1_b"] = dz1.sum(axis=(0, 2))
    return {k: grads[k] for k in model.params}


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, model: SegModel, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            model.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        model.touch()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    pretrain_iters: int = 70
    total_iters: int = 300
    weights: LossWeights = LossWeights()
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mapping: MaskMapSpec = CARDIAC
    intensity_mode: str = "mean"
    # random right-angle rotations and flips of labeled pairs
    augment_labeled: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.pretrain_iters < 0 or self.total_iters < 0:
            raise ValueError("batch_size must be >= 1 and iteration counts >= 0")


LOG_FIELDS = ("step", "phase", "total", "sup", "un", "ai", "transforms")


def format_log(log):
    """Render training log records as tab-separated text with a header."""
    lines = ["\t".join(LOG_FIELDS)]
    for rec in log:
        lines.append("\t".join([
            str(rec["step"]), rec["phase"],
            *(repr(float(rec[k])) for k in ("total", "sup", "un", "ai")),
            rec["transforms"] or "-",
        ]))
    return "\n".join(lines) + "\n"


def _step_rng(seed, step):
    return np.random.default_rng([int(seed), int(step)])


def _as_image(item):
    return np.asarray(getattr(item, "image", item), dtype=np.float64)


def train(model: SegModel, labeled, unlabeled=(), cfg: TrainConfig = TrainConfig(),
          log_path=None, optimizer: Adam = None, start_step=0):
    """Train ``model`` in place and return ``(model, log)``.

    ``labeled`` holds objects with ``image`` and binary ``labels`` stacks,
    ``unlabeled`` holds images (or objects with ``image``). The first
    ``pretrain_iters`` steps are supervised only; the remaining steps use
    batches of ``ceil(b/2)`` labeled and ``floor(b/2)`` unlabeled items under
    the full objective. With ``alpha = 0`` the labeled list may be empty, in
    which case every step draws unlabeled items only. Each step draws from a
    generator seeded by ``(cfg.seed, step)``, so passing the optimizer and
    step saved in a checkpoint continues a run exactly.
    """
    labeled = list(labeled)
    unlabeled = [_as_image(u) for u in unlabeled]
    if not labeled and (cfg.weights.alpha > 0 or not unlabeled):
        raise ValueError("training needs at least one labeled pair "
                         "(or alpha = 0 and unlabeled images)")
    if model.n_psi != cfg.mapping.n_channels:
        raise ValueError("model channel count does not match the mask mapping")
    opt = optimizer or Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    warm = cfg.weights.with_(beta=0.0, gamma=0.0)
    log = []
    out = open(log_path, "w") if log_path is not None else None
    try:
        if out is not None:
            out.write("\t".join(LOG_FIELDS) + "\n")
        for step in range(start_step, cfg.total_iters):
            rng = _step_rng(cfg.seed, step)
            # without labeled pairs there is nothing to pretrain on
            phase = "pretrain" if step < cfg.pretrain_iters and labeled else "joint"
            weights = warm if phase == "pretrain" else cfg.weights
            if phase == "pretrain" or not unlabeled:
                n_lab, n_unl = cfg.batch_size, 0
            elif not labeled:
                n_lab, n_unl = 0, cfg.batch_size
            else:
                n_lab, n_unl = (cfg.batch_size + 1) // 2, cfg.batch_size // 2
            images, labels = [], []
            for i in rng.integers(len(labeled), size=n_lab) if n_lab else ():
                img, lab = _as_image(labeled[i]), np.asarray(labeled[i].labels, dtype=np.float64)
                if cfg.augment_labeled:
                    t = augment.sample_transform(rng)
                    img, lab = augment.apply_spatial(t, img), augment.apply_spatial(t, lab)
                images.append(img)
                labels.append(lab)
            for i in rng.integers(len(unlabeled), size=n_unl) if n_unl else ():
                images.append(unlabeled[i])
                labels.append(None)

            transforms = []
            batch = list(images)
            if weights.gamma > 0:
                transforms = [augment.sample_transform(rng) for _ in images]
                batch += [augment.apply(t, im) for t, im in zip(transforms, images)]
            psi, bias, cache = forward(model, np.stack(batch))
            n = len(images)
            items = [SegItem(images[k], psi[k], bias[k], labels[k],
                             psi[n + k] if transforms else None,
                             transforms[k] if transforms else None)
                     for k in range(n)]
            rep = segmentation_loss(items, weights, cfg.mapping, cfg.intensity_mode)
            if not np.isfinite(rep.value):
                raise TrainingError(step, f"non-finite loss {rep.value}")

            g_psi = np.zeros_like(psi)
            g_bias = np.zeros_like(bias)
            for k, g in enumerate(rep.grad_psi):
                g_psi[k] = g.psi
                g_bias[k] = g.bias
                if g.psi_aug is not None:
                    g_psi[n + k] = g.psi_aug
            grads = backward(model, cache, g_psi, g_bias)
            opt.step(model, grads)

            rec = {"step": step, "phase": phase, "total": rep.value,
                   **rep.components,
                   "transforms": ",".join(t.token() for t in transforms)}
            log.append(rec)
            if out is not None:
                out.write(format_log([rec]).split("\n", 1)[1])
    finally:
        if out is not None:
            out.close()
    return model, log


def predict(model: SegModel, image, spec: MaskMapSpec = CARDIAC):
    """Class masks and hard label map for one image."""
    psi, _, _ = forward(model, image)
    phi = apply_mapping(psi, spec)
    return phi, harden(phi)


def _encode(fields_, tensors):
    desc = " ".join(f"{k}={v}" for k, v in fields_.items())
    desc += " tensors=" + ";".join(f"{k}:{','.join(map(str, v.shape))}" for k, v in tensors.items())
    buf = io.BytesIO()
    buf.write(MAGIC + b"\n")
    buf.write(desc.encode("ascii") + b"\n")
    for v in tensors.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def _decode(path):
    data = Path(path).read_bytes()
    head, sep, rest = data.partition(b"\n")
    if head != MAGIC or not sep:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    desc, sep, blob = rest.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: truncated checkpoint header")
    try:
        fields_ = dict(tok.split("=", 1) for tok in desc.decode("ascii").split())
        entries = [e.split(":") for e in fields_.pop("tensors").split(";")]
        shapes = [(name, tuple(int(d) for d in dims.split(","))) for name, dims in entries]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: malformed checkpoint header") from exc
    tensors = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        chunk = blob[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated tensor data")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return fields_, tensors


def save_checkpoint(model: SegModel, path, optimizer: Adam = None, step=None):
    """Write the magic line, a one-line architecture descriptor, then every
    tensor in declaration order as little-endian float64.

    With ``optimizer`` and ``step`` the Adam moments follow the parameters so
    that training can resume exactly where it stopped.
    """
    fields_ = {"arch": ARCH, "width": model.width, "n_psi": model.n_psi, "seed": model.seed}
    tensors = dict(model.params)
    if optimizer is not None:
        fields_["step"] = int(step)
        fields_["adam"] = ",".join(repr(float(x)) for x in
                                   (optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps))
        fields_["adam_t"] = optimizer.t
        tensors.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    Path(path).write_bytes(_encode(fields_, tensors))


def load_training_state(path):
    """Return ``(model, optimizer or None, step or None)`` from a checkpoint."""
    fields_, tensors = _decode(path)
    if fields_.get("arch") != ARCH:
        raise ValueError(f"{path}: unknown architecture {fields_.get('arch')!r}")
    try:
        model = SegModel(int(fields_["n_psi"]), int(fields_["seed"]), int(fields_["width"]))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed architecture descriptor") from exc
    for name in model.params:
        if name not in tensors or tensors[name].shape != model.params[name].shape:
            raise ValueError(f"{path}: tensor {name} missing or of the wrong shape")
        model.params[name] = tensors[name]
    opt = step = None
    if "adam" in fields_:
        lr, b1, b2, eps = (float(x) for x in fields_["adam"].split(","))
        opt = Adam(model.params, lr, b1, b2, eps)
        opt.t = int(fields_["adam_t"])
        for k in model.params:
            opt.m[k] = tensors[f"adam_m/{k}"]
            opt.v[k] = tensors[f"adam_v/{k}"]
        step = int(fields_["step"])
    return model, opt, step


def load_checkpoint(path):
    return load_training_state(path)[0]
