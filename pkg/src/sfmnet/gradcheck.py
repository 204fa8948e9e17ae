"""Finite-difference verification of the reverse-mode gradients.

Two suites: every registered primitive at random points, and the full
pipeline loss (all terms enabled, both directions) on random problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry, losses, warping  # noqa: F401  (registers their primitives)
from .geometry import CameraIntrinsics, rotation_from_sines
from .losses import DepthSupervision, LossWeights, Observations, PoseSupervision
from .solver import ProblemState, SolverConfig, make_loss


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    kinks: int = 0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def rel_error(a, b, floor: float) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# --- primitives --------------------------------------------------------------

def _away(rng, n, margin=0.05):
    """Uniform in [-1, 1] but at least ``margin`` from 0."""
    x = rng.uniform(margin, 1.0, n)
    return x * rng.choice([-1.0, 1.0], n)


def _frac_grid(rng, shape, lo, hi):
    """Continuous coordinates kept away from integer lattice lines."""
    base = rng.integers(lo, hi, shape).astype(np.float64)
    return base + rng.uniform(0.05, 0.95, shape)


def _primitive_cases(rng):
    """name -> (function of a dict of arrays, dict of input arrays)."""
    n = 5
    pos = lambda: rng.uniform(0.2, 2.0, n)  # noqa: E731
    anyv = lambda: rng.normal(0, 1, n)  # noqa: E731
    a, b = anyv(), anyv()
    gap = _away(rng, n, 0.05)
    src = rng.uniform(0, 1, (5, 6, 2))
    return {
        "neg": (lambda p: ad.neg(p["x"]), {"x": anyv()}),
        "abs": (lambda p: ad.abs_(p["x"]), {"x": _away(rng, n)}),
        "sqrt": (lambda p: ad.sqrt(p["x"]), {"x": pos()}),
        "exp": (lambda p: ad.exp(p["x"]), {"x": anyv()}),
        "log": (lambda p: ad.log(p["x"]), {"x": pos()}),
        "tanh": (lambda p: ad.tanh(p["x"]), {"x": anyv()}),
        "sigmoid": (lambda p: ad.sigmoid(p["x"]), {"x": 3 * anyv()}),
        "softplus": (lambda p: ad.softplus(p["x"]), {"x": 3 * anyv()}),
        "arccos": (lambda p: ad.arccos(p["x"]), {"x": rng.uniform(-0.9, 0.9, n)}),
        "sin": (lambda p: ad.sin(p["x"]), {"x": anyv()}),
        "cos": (lambda p: ad.cos(p["x"]), {"x": anyv()}),
        "square": (lambda p: ad.square(p["x"]), {"x": anyv()}),
        "add": (lambda p: ad.add(p["a"], p["b"]), {"a": a, "b": b}),
        "sub": (lambda p: ad.sub(p["a"], p["b"]), {"a": a, "b": b}),
        "mul": (lambda p: ad.mul(p["a"], p["b"]), {"a": a, "b": b}),
        "div": (lambda p: ad.div(p["a"], p["b"]), {"a": a, "b": pos()}),
        "atan2": (lambda p: ad.atan2(p["a"], p["b"]), {"a": a, "b": pos()}),
        "minimum": (lambda p: ad.minimum(p["a"], p["b"]), {"a": a, "b": a + gap}),
        "maximum": (lambda p: ad.maximum(p["a"], p["b"]), {"a": a, "b": a + gap}),
        "sum": (lambda p: ad.sum_(p["x"], axis=0), {"x": rng.normal(0, 1, (3, 4))}),
        "getitem": (lambda p: p["x"][1:, ::2], {"x": rng.normal(0, 1, (3, 4))}),
        "reshape": (lambda p: ad.reshape(p["x"], (4, 3)), {"x": rng.normal(0, 1, (3, 4))}),
        "stack": (lambda p: ad.stack([p["a"], p["b"]], axis=1), {"a": a, "b": b}),
        "matmul": (lambda p: ad.matmul(p["A"], p["v"]), {"A": rng.normal(0, 1, (3, 3)), "v": rng.normal(0, 1, 3)}),
        "transpose": (lambda p: ad.transpose(p["A"]), {"A": rng.normal(0, 1, (2, 3))}),
        "rotation_matrix": (lambda p: geometry.rotation_matrix(p["s"]), {"s": rng.uniform(-0.95, 0.95, 3)}),
        "rigid_apply": (lambda p: geometry._rigid_apply(p["R"], p["t"], p["p"], p["P"]),
                        {"R": rng.normal(0, 1, (3, 3)), "t": anyv()[:3], "p": anyv()[:3],
                         "P": rng.normal(0, 1, (3, 2, 3))}),
        "bilinear_sample": (lambda p: warping._bilinear(p["src"], p["x"], p["y"]),
                            {"src": src, "x": _frac_grid(rng, (3, 4), 0, 5), "y": _frac_grid(rng, (3, 4), 0, 4)}),
        "norm": (lambda p: losses._norm(p["v"]), {"v": anyv()}),
    }


def check_primitives(seed: int = 0, points: int = 100, eps: float = 1e-5, tol: float = 1e-6) -> list[CheckResult]:
    """Reverse-mode vs central differences for every registered primitive."""
    rng = np.random.default_rng(seed)
    results = []
    names = sorted(ad.PRIMITIVES)
    for name in names:
        worst, count, failures = 0.0, 0, []
        for _ in range(points):
            cases = _primitive_cases(rng)
            if name not in cases:
                failures.append("no gradient check case for this primitive")
                break
            fn, inputs = cases[name]
            out_shape = np.shape(ad.value_of(fn(inputs)))
            weights = rng.normal(0, 1, out_shape)

            def loss(p):
                return ad.sum_(fn(p) * weights)

            _, g = ad.value_and_grad(loss, inputs)
            fd = ad.finite_diff_grad(loss, inputs, eps)
            for k in inputs:
                err = rel_error(g[k], fd[k], 1e-6)
                worst = max(worst, float(err.max(initial=0.0)))
                count += err.size
                if np.any(err > tol):
                    failures.append(f"input {k}: rel error {err.max():.2e}")
        results.append(CheckResult(name, worst, count, failures=failures[:3]))
    return results


# --- pipeline ----------------------------------------------------------------

def random_problem(rng, size: int = 16, k: int = 3):
    """Random frames, raw state and full supervision, with every loss term enabled."""
    h = w = size
    I_t = rng.uniform(0, 1, (h, w, 3))
    I_tp1 = np.clip(I_t + rng.normal(0, 0.1, (h, w, 3)), 0, 1)
    state = ProblemState.initial(h, w, k, int(rng.integers(1 << 31)))
    for name, v in state.params.items():
        if name.startswith(("depth", "mask")):
            state.params[name] = v + rng.normal(0, 0.5, v.shape)
        else:
            state.params[name] = v + rng.normal(0, 0.05, v.shape)
    d_gt = rng.uniform(1.5, 4.0, (h, w)) * (rng.uniform(size=(h, w)) > 0.2)
    R = rotation_from_sines(*rng.uniform(-0.2, 0.2, 3))
    obs = Observations(
        I_t, I_tp1, CameraIntrinsics(rng.uniform(0.8, 1.2), rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6)),
        depth_t=DepthSupervision.from_depth(d_gt), depth_tp1=DepthSupervision.from_depth(d_gt[::-1]),
        pose=PoseSupervision(R, rng.normal(0, 0.1, 3)),
        flow=(rng.normal(0, 1, (h, w)), rng.normal(0, 1, (h, w))),
        flow_bwd=(rng.normal(0, 1, (h, w)), rng.normal(0, 1, (h, w))),
    )
    weights = LossWeights(w_depth_sup=1.0, w_pose_trans=1.0, w_pose_rot=1.0, w_flow_sup=1.0)
    config = SolverConfig(k=k, weights=weights, freeze_pivots=False)
    step = int(rng.integers(0, 3000))
    return state, obs, config, step


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def check_pipeline(seed: int = 0, problems: int = 20, size: int = 16, k: int = 3, eps: float = 1e-4,
                   tol: float = 1e-3, grid_coords: int = 24, floor: float = 1e-6,
                   max_kink_fraction: float = 0.5) -> list[CheckResult]:
    """Full-loss gradient vs central differences on random problems.

    Every motion coordinate is checked, plus ``grid_coords`` random entries of
    each per-pixel variable.  A coordinate is near a kink when some L1, clamp,
    or bilinear-cell branch differs between ``x - eps``, ``x`` and ``x + eps``;
    such coordinates are counted but not compared.  A problem where more than
    ``max_kink_fraction`` of the coordinates are kinked fails, so the check
    cannot pass vacuously.
    """
    rng = np.random.default_rng(seed)
    results = []
    for i in range(problems):
        state, obs, config, step = random_problem(rng, size, k)
        loss = make_loss(state, obs, config)
        params = {n: state.params[n].copy() for n in state.params}

        def f(p):
            with ad.branch_trace() as trace:
                value = float(ad.value_of(loss(p, step)))
            return value, trace

        _, grad = ad.value_and_grad(lambda p: loss(p, step), params)
        _, base = f(params)
        worst, checked, kinks, failures = 0.0, 0, 0, []
        for name in sorted(params):
            flat = params[name].reshape(-1)
            if name.startswith(("depth", "mask")):
                idx = rng.choice(flat.size, min(grid_coords, flat.size), replace=False)
            else:
                idx = np.arange(flat.size)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + eps
                fp, tp = f(params)
                flat[j] = orig - eps
                fm, tm = f(params)
                flat[j] = orig
                checked += 1
                if not (_same_branches(base, tp) and _same_branches(base, tm)):
                    kinks += 1
                    continue
                g = grad[name].reshape(-1)[j]
                central = (fp - fm) / (2 * eps)
                err = float(rel_error(g, central, floor))
                worst = max(worst, err)
                if err > tol:
                    failures.append(f"{name}[{j}]: g={g:.8g} fd={central:.8g} rel={err:.2e}")
        if kinks > max_kink_fraction * checked:
            failures.append(f"{kinks} of {checked} coordinates straddle a kink")
        results.append(CheckResult(f"problem{i}", worst, checked, kinks, failures[:5]))
    return results
