"""Direct gradient-based recovery of depth, masks and rigid motions for a frame pair."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .geometry import CameraIntrinsics, RigidMotion
from .losses import LossWeights, Observations, PairEstimate, total_loss

log = logging.getLogger(__name__)

DEPTH_BIAS = 1.0
DEPTH_MAX = 100.0
# softplus(u) = 1 gives an initial depth of 2
DEPTH_INIT_U = math.log(math.e - 1.0)

DIRECTIONS = ("fwd", "bwd")
MOTION_PARTS = ("rot", "trans", "pivot")


class SolverError(RuntimeError):
    def __init__(self, iteration: int, term: str, message: str = ""):
        super().__init__(f"non-finite loss at iteration {iteration} (term: {term}) {message}".strip())
        self.iteration = iteration
        self.term = term


def constrain_depth(u):
    """d = min(1 + softplus(u), 100)."""
    return ad.minimum(DEPTH_BIAS + ad.softplus(u), DEPTH_MAX)


def constrain_sin(v):
    return ad.tanh(v)


def mask_multiplier(step: int, rate: float = 1e-3, cap: float = 10.0) -> float:
    return min(1.0 + step * rate, cap)


def sharpen_masks(logits, step: int, rate: float = 1e-3, cap: float = 10.0):
    return ad.sigmoid(mask_multiplier(step, rate, cap) * logits)


@dataclass
class SolverConfig:
    iterations: int = 2000
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_rate: float = 1e-3
    mask_cap: float = 10.0
    seed: int = 0
    k: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    freeze_pivots: bool = True
    symmetric: bool = True
    pyramid_levels: int = 1
    # per-parameter-group multipliers on lr, keyed by group prefix ("depth", "mask", "cam", "obj")
    lr_scale: dict = field(default_factory=dict)
    # cosine decay of the step size to lr * lr_final over each level; 1.0 keeps it constant
    lr_final: float = 0.05
    log_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0 < self.lr_final <= 1:
            raise ValueError("lr_final must be in (0, 1]")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass
class ProblemState:
    """Raw (unconstrained) variables of a frame pair, keyed by name.

    Keys: ``depth_t``, ``depth_tp1`` (h, w); ``mask_t``, ``mask_tp1`` (k, h, w);
    ``cam_<dir>_<part>`` (3,) and ``obj_<dir>_<part>`` (k, 3) for dir in
    fwd/bwd and part in rot/trans/pivot.
    """

    params: dict
    k: int
    step: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.params["depth_t"].shape

    def copy(self) -> "ProblemState":
        return ProblemState({n: v.copy() for n, v in self.params.items()}, self.k, self.step)

    @classmethod
    def initial(cls, h: int, w: int, k: int = 3, seed: int = 0) -> "ProblemState":
        rng = np.random.default_rng(seed)
        p = {
            "depth_t": np.full((h, w), DEPTH_INIT_U),
            "depth_tp1": np.full((h, w), DEPTH_INIT_U),
            "mask_t": rng.normal(0.0, 0.01, (k, h, w)),
            "mask_tp1": rng.normal(0.0, 0.01, (k, h, w)),
        }
        for d in DIRECTIONS:
            for part in MOTION_PARTS:
                p[f"cam_{d}_{part}"] = np.zeros(3)
                p[f"obj_{d}_{part}"] = np.zeros((k, 3))
        return cls(p, k)

    def estimate(self, step: int | None = None, rate: float = 1e-3, cap: float = 10.0,
                 params: Mapping | None = None) -> PairEstimate:
        """Apply the constraint ops. ``params`` may override entries (e.g. with tensors)."""
        step = self.step if step is None else step
        p = dict(self.params)
        if params is not None:
            p.update(params)
        motions = {}
        for d in DIRECTIONS:
            motions[f"cam_{d}"] = RigidMotion(constrain_sin(p[f"cam_{d}_rot"]), p[f"cam_{d}_trans"],
                                              p[f"cam_{d}_pivot"])
            motions[f"obj_{d}"] = [RigidMotion(constrain_sin(p[f"obj_{d}_rot"][i]), p[f"obj_{d}_trans"][i],
                                               p[f"obj_{d}_pivot"][i]) for i in range(self.k)]
        masks_t = sharpen_masks(p["mask_t"], step, rate, cap) if self.k else None
        masks_tp1 = sharpen_masks(p["mask_tp1"], step, rate, cap) if self.k else None
        return PairEstimate(
            depth_t=constrain_depth(p["depth_t"]), depth_tp1=constrain_depth(p["depth_tp1"]),
            masks_t=masks_t, masks_tp1=masks_tp1,
            cam_fwd=motions["cam_fwd"], cam_bwd=motions["cam_bwd"],
            objs_fwd=motions["obj_fwd"], objs_bwd=motions["obj_bwd"],
        )

    def upsample(self, h: int, w: int) -> "ProblemState":
        """Nearest-neighbour upsampling of the grid variables to (h, w)."""
        p = dict(self.params)
        for name in ("depth_t", "depth_tp1", "mask_t", "mask_tp1"):
            p[name] = _resize_nearest(p[name], h, w)
        return ProblemState({n: np.array(v, copy=True) for n, v in p.items()}, self.k, self.step)


def _resize_nearest(a: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum((np.arange(h) * a.shape[-2]) // h, a.shape[-2] - 1)
    cols = np.minimum((np.arange(w) * a.shape[-1]) // w, a.shape[-1] - 1)
    return a[..., rows[:, None], cols[None, :]]


class Adam:
    """Adam with bias correction; updates the parameter dict in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scale: Mapping[str, float] | None = None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def _scale(self, name: str) -> float:
        for prefix, s in self.lr_scale.items():
            if name.startswith(prefix):
                return s
        return 1.0

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            params[name] = params[name] - self.lr * self._scale(name) * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(lr: float, it: int, iterations: int, final: float) -> float:
    if iterations <= 1 or final >= 1.0:
        return lr
    frac = it / (iterations - 1)
    return lr * (final + (1.0 - final) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def adam_minimize(loss_fn: Callable, params: Mapping[str, np.ndarray], iterations: int, lr: float = 0.1,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                  lr_scale: Mapping[str, float] | None = None, lr_final: float = 1.0,
                  on_step: Callable | None = None) -> tuple[dict, list[float]]:
    """Minimize a scalar ``loss_fn(params, step)`` with Adam.

    Returns the final parameters and the loss evaluated before each step.
    """
    params = {n: np.array(v, dtype=np.float64, copy=True) for n, v in params.items()}
    opt = Adam(lr, beta1, beta2, eps, lr_scale)
    trace = []
    for it in range(iterations):
        opt.lr = cosine_lr(lr, it, iterations, lr_final)
        try:
            value, grads = ad.value_and_grad(lambda p: loss_fn(p, it), params)
        except ad.NonFiniteError as err:
            raise SolverError(it, err.primitive) from err
        if not math.isfinite(value):
            raise SolverError(it, "total")
        trace.append(value)
        opt.step(params, grads)
        if on_step is not None:
            on_step(it, value, params)
    return params, trace


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _downsample_obs(obs: Observations) -> Observations:
    from .losses import DepthSupervision

    def dsup(s):
        if s is None:
            return None
        m = _downsample(s.dmask_gt)
        d = _downsample(s.d_gt * s.dmask_gt)
        full = m >= 1.0
        return DepthSupervision(np.where(full, d, 0.0), full.astype(np.float64))

    def flow(f):
        return None if f is None else (_downsample(np.asarray(f[0])) / 2.0, _downsample(np.asarray(f[1])) / 2.0)

    return replace(obs, I_t=_downsample(obs.I_t), I_tp1=_downsample(obs.I_tp1), depth_t=dsup(obs.depth_t),
                   depth_tp1=dsup(obs.depth_tp1), flow=flow(obs.flow), flow_bwd=flow(obs.flow_bwd))


def free_parameter_names(state: ProblemState, config: SolverConfig) -> list[str]:
    names = []
    for n in sorted(state.params):
        if config.freeze_pivots and n.endswith("_pivot"):
            continue
        if state.k == 0 and (n.startswith("mask_") or n.startswith("obj_")):
            continue
        names.append(n)
    return names


def make_loss(state: ProblemState, obs: Observations, config: SolverConfig,
              terms: dict | None = None, diagnostics: dict | None = None) -> Callable:
    """Loss of the free parameters at a given iteration, as used by the optimizer."""

    def loss(free: Mapping, step: int):
        est = state.estimate(state.step + step, config.mask_rate, config.mask_cap, params=free)
        return total_loss(est, obs, config.weights, config.symmetric, terms, diagnostics)

    return loss


def _run_level(obs: Observations, state: ProblemState, config: SolverConfig, iterations: int):
    names = free_parameter_names(state, config)
    free = {n: state.params[n] for n in names}
    terms: dict = {}
    loss = make_loss(state, obs, config, terms)

    def on_step(it, value, params):
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d loss %.6g %s", state.step + it, value,
                     " ".join(f"{k}={v:.4g}" for k, v in sorted(terms.items())))

    try:
        final, trace = adam_minimize(loss, free, iterations, config.lr, config.beta1, config.beta2, config.eps,
                                     config.lr_scale, config.lr_final, on_step)
    except SolverError as err:
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        if bad:
            err.term = ",".join(bad)
        raise SolverError(err.iteration + state.step, err.term) from err
    out = state.copy()
    out.params.update(final)
    out.step = state.step + iterations
    return out, trace


def optimize(I_t, I_tp1, intrinsics: CameraIntrinsics | None = None, init: ProblemState | None = None,
             config: SolverConfig | None = None, supervision: Optional[Mapping] = None
             ) -> tuple[ProblemState, list[float]]:
    """Minimize the total loss over a frame pair.

    ``supervision`` may hold any of the optional :class:`Observations` fields
    (``depth_t``, ``depth_tp1``, ``pose``, ``flow``, ``flow_bwd``).
    Returns the final raw state and the per-iteration loss trace.
    """
    config = config or SolverConfig()
    intrinsics = intrinsics or CameraIntrinsics()
    I_t = np.asarray(I_t, dtype=np.float64)
    I_tp1 = np.asarray(I_tp1, dtype=np.float64)
    h, w = I_t.shape[:2]
    if init is None:
        init = ProblemState.initial(h, w, config.k, config.seed)
    if init.shape != (h, w):
        raise ValueError(f"initial state grid {init.shape} does not match images {(h, w)}")
    obs = Observations(I_t, I_tp1, intrinsics, **dict(supervision or {}))
    if config.iterations == 0:
        return init.copy(), []

    levels = [obs]
    for _ in range(config.pyramid_levels - 1):
        levels.append(_downsample_obs(levels[-1]))
    levels.reverse()

    per_level = [config.iterations // len(levels)] * len(levels)
    per_level[-1] += config.iterations - sum(per_level)

    lh, lw = levels[0].I_t.shape[:2]
    state = init.upsample(lh, lw) if (lh, lw) != (h, w) else init.copy()
    trace: list[float] = []
    for i, (lobs, iters) in enumerate(zip(levels, per_level)):
        lh, lw = lobs.I_t.shape[:2]
        if state.shape != (lh, lw):
            state = state.upsample(lh, lw)
        state, tr = _run_level(lobs, state, config, iters)
        trace.extend(tr)
    return state, trace
