"""Direct per-image minimization of the unsupervised energy.

Mask channels and the bias field are parameterized by logits passed through a
sigmoid. The class intensities are refreshed in closed form every few
iterations and held fixed in between, while a backtracking gradient descent
lowers the energy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .energies import LossWeights, class_intensities, unsupervised_loss
from .maskmap import CARDIAC, MaskMapSpec, apply_mapping

__all__ = [
    "OptimizationError",
    "SolveConfig",
    "VariationalState",
    "SolveResult",
    "solve",
    "solve_once",
    "harden",
    "sigmoid",
    "logit",
]

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
MAX_HALVINGS = 20


class OptimizationError(RuntimeError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# TV is summed over pixels while the fidelity term is a per-pixel mean, so
# direct solves use a smoothness weight on the order of 1 / (pixel count).
DIRECT_WEIGHTS = LossWeights(eta=1.0, epsilon=5e-6, bias_smooth=5.0)


@dataclass(frozen=True)
class SolveConfig:
    """Settings for :func:`solve`.

    ``step_size`` is the per-pixel logit step: the gradient of the (pixel
    averaged) energy is multiplied by the pixel count before stepping.
    """

    step_size: float = 20.0
    max_iters: int = 300
    c_update_period: int = 20
    rel_tol: float = 1e-6
    seed: int = 0
    restarts: int = 3
    weights: LossWeights = DIRECT_WEIGHTS
    mapping: MaskMapSpec = CARDIAC
    intensity_mode: str = "lsq"
    init_scale: float = 0.1
    init_c: str = "kmeans"  # or "masks": first intensities from the initial masks
    # >0: start the mask logits from the k-means labeling at this strength
    init_from_clusters: float = 2.0
    bias_step_scale: float = 1.0
    bias_delay: int = 20  # iterations with the bias field frozen at its start value
    tv_eps: float = 1e-6
    bias_tv_eps: float = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1 or self.c_update_period < 1 or self.restarts < 1:
            raise ValueError("max_iters, c_update_period and restarts must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.init_c not in ("kmeans", "masks"):
            raise ValueError(f"unknown init_c {self.init_c!r}")


@dataclass
class VariationalState:
    psi_logits: np.ndarray
    bias_logits: np.ndarray
    iteration: int = 0
    energy_history: list = field(default_factory=list)
    # iterations at which the class intensities were refreshed
    c_updates: list = field(default_factory=list)
    c: np.ndarray = None
    seed: int = 0

    @property
    def psi(self):
        return sigmoid(self.psi_logits)

    @property
    def bias(self):
        return sigmoid(self.bias_logits)


@dataclass
class SolveResult:
    phi: np.ndarray
    bias: np.ndarray
    state: VariationalState
    energy: float
    restart_energies: list = field(default_factory=list)

    @property
    def labels(self):
        return harden(self.phi)


def harden(phi):
    """Per-pixel argmax over class channels; ties go to the lowest index."""
    return np.argmax(np.asarray(phi), axis=0)


def kmeans_1d(values, k, iters=50):
    """Lloyd's algorithm on scalar intensities.

    Centers start evenly spaced across the robust intensity range so that a
    dominant background cannot swallow every initial center.
    """
    values = np.sort(np.ravel(values))
    lo, hi = np.quantile(values, [0.005, 0.995])
    centers = np.linspace(lo, hi, k)
    for _ in range(iters):
        edges = (centers[1:] + centers[:-1]) / 2
        idx = np.searchsorted(edges, values)
        new = np.array([values[idx == j].mean() if np.any(idx == j) else centers[j]
                        for j in range(k)])
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def class_codes(spec: MaskMapSpec):
    """For each class, a binary channel vector whose mapped masks are that
    class's one-hot vector, preferring vectors that satisfy every inclusion."""
    n = spec.n_channels
    codes = [None] * spec.n_classes
    for bits in range(2 ** n):
        v = np.array([(bits >> i) & 1 for i in range(n)], dtype=np.float64)
        phi = apply_mapping(v[:, None, None], spec)[:, 0, 0]
        if not np.all((phi == 0) | (phi == 1)) or phi.sum() != 1:
            continue
        k = int(np.argmax(phi))
        ok = all(v[o - 1] >= v[i - 1] for i, o in spec.inclusions)
        if codes[k] is None or (ok and not codes[k][1]):
            codes[k] = (v, ok)
    if any(c is None for c in codes):
        raise ValueError("mapping cannot represent every class with binary channels")
    return np.stack([c[0] for c in codes])


def _energy(image, state, cfg, c, grad=False):
    psi, bias = state.psi, state.bias
    rep = unsupervised_loss(image, psi, bias, cfg.mapping, cfg.weights, c=c,
                            tv_eps=cfg.tv_eps, bias_tv_eps=cfg.bias_tv_eps)
    if not grad:
        return rep.value, None, None
    g_psi = rep.grad_psi * psi * (1.0 - psi)
    g_bias = rep.grad_bias * bias * (1.0 - bias)
    return rep.value, g_psi, g_bias


def solve_once(image, cfg: SolveConfig, seed):
    """Single gradient-descent run from a seeded initialization."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    rng = np.random.default_rng(seed)
    shape = (cfg.mapping.n_channels,) + image.shape
    state = VariationalState(
        psi_logits=rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape),
        bias_logits=np.zeros(image.shape),
        seed=seed,
    )
    npix = image.size
    step = cfg.step_size
    c = None
    energy = None
    for it in range(cfg.max_iters):
        if it == 0 and cfg.init_c == "kmeans":
            # initial bias is 0.5, so intensities are stated in bias-divided units
            centers = kmeans_1d(image, cfg.mapping.n_classes) / 0.5
            perm = rng.permutation(cfg.mapping.n_classes)
            c = centers[perm]
            if cfg.init_from_clusters > 0:
                edges = (centers[1:] + centers[:-1]) / 2
                cluster = np.searchsorted(edges, image / 0.5)
                cls = np.argsort(perm)[cluster]
                code = class_codes(cfg.mapping)[cls]  # H, W, channels
                state.psi_logits = cfg.init_from_clusters * (2 * np.moveaxis(code, -1, 0) - 1)
            state.c_updates.append(it)
            energy = None
        elif it % cfg.c_update_period == 0:
            phi = apply_mapping(state.psi, cfg.mapping)
            c = class_intensities(image, state.bias, phi, cfg.intensity_mode).c
            state.c_updates.append(it)
            energy = None
        if energy is None:
            energy, g_psi, g_bias = _energy(image, state, cfg, c, grad=True)
        if not np.isfinite(energy) or energy > DIVERGENCE_LIMIT:
            raise OptimizationError(f"energy diverged at iteration {it} ({energy})")

        bias_step = cfg.bias_step_scale if it >= cfg.bias_delay else 0.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            trial = VariationalState(state.psi_logits - step * npix * g_psi,
                                     state.bias_logits - bias_step * step * npix * g_bias)
            e_new, tg_psi, tg_bias = _energy(image, trial, cfg, c, grad=True)
            if np.isfinite(e_new) and e_new <= energy:
                accepted = True
                break
            step *= 0.5
        if accepted:
            state.psi_logits, state.bias_logits = trial.psi_logits, trial.bias_logits
            energy, g_psi, g_bias = e_new, tg_psi, tg_bias
            step = min(step * 1.5, cfg.step_size)
        else:
            step = cfg.step_size
        state.energy_history.append(energy)
        state.iteration = it + 1

        hist = state.energy_history
        if len(hist) > 10 and it % cfg.c_update_period != 0:
            old = hist[-11]
            if old - hist[-1] < cfg.rel_tol * abs(old):
                break

    phi = apply_mapping(state.psi, cfg.mapping)
    state.c = class_intensities(image, state.bias, phi, cfg.intensity_mode).c
    final, _, _ = _energy(image, state, cfg, state.c)
    return SolveResult(phi, state.bias, state, final)


def restart_seed(seed, restart):
    return int(np.random.SeedSequence([int(seed), int(restart)]).generate_state(1)[0])


def solve(image, cfg: SolveConfig = SolveConfig()):
    """Minimize the unsupervised energy for one image.

    Runs ``cfg.restarts`` seeded restarts and keeps the lowest final energy,
    ties going to the smaller restart seed. Returns a :class:`SolveResult`.
    """
    best = None
    energies = []
    for r in range(cfg.restarts):
        res = solve_once(image, cfg, restart_seed(cfg.seed, r))
        energies.append(res.energy)
        logger.debug("restart %d: energy %.6g after %d iterations",
                     r, res.energy, res.state.iteration)
        if best is None or (res.energy, res.state.seed) < (best.energy, best.state.seed):
            best = res
    best.restart_energies = energies
    return best
