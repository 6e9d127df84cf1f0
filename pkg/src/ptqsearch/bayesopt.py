"""Gaussian-process surrogate optimization with a UCB acquisition.

Small fixed-hyper-parameter GP: RBF kernel over inputs normalized to
the unit box, constant observation noise, no kernel fitting. The
acquisition maximizer is multi-start local search from seeded random
starts. Everything is deterministic given the seed.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import ArgumentError


@dataclass
class BOConfig:
    n_extra: int = 50
    kappa: float = 2.576
    length_scale: float = 0.2
    noise: float = 1e-6
    acq_starts: int = 256
    refine_starts: int = 5
    seed: int = 0


@dataclass
class BOResult:
    params: tuple
    value: float
    points: list = field(default_factory=list)  # (params, value, source)


class _GP:
    """RBF-kernel regressor on unit-box inputs with standardized targets."""

    def __init__(self, x, y, length_scale, noise):
        self.x = x
        self.ls = length_scale
        self.y_mean = float(np.mean(y))
        y_std = float(np.std(y))
        self.y_std = y_std if y_std > 1e-12 else 1.0
        z = (y - self.y_mean) / self.y_std
        k = self._kernel(x, x)
        jitter = noise
        for _ in range(8):
            try:
                self.chol = cho_factor(k + jitter * np.eye(len(x)), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
        else:
            raise ArgumentError("GP covariance is not positive definite")
        self.alpha = cho_solve(self.chol, z)

    def _kernel(self, a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) / self.ls) ** 2
        return np.exp(-0.5 * d2.sum(axis=2))

    def predict(self, x):
        ks = self._kernel(x, self.x)
        mu = ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        var = np.clip(1.0 - np.einsum("ij,ji->i", ks, v), 0.0, None)
        return mu * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def _normalize(points, bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return (np.asarray(points, dtype=np.float64) - lo) / (hi - lo)


def _denormalize(point, bounds):
    return tuple(float(b[0] + p * (b[1] - b[0])) for p, b in zip(point, bounds))


def bo_optimize(f, bounds, probes, config=None):
    """Maximize f over the box `bounds`, seeded with evaluated grid probes.

    probes: list of (params_tuple, value) registered as observations
    before any surrogate iteration. Runs config.n_extra suggest/evaluate
    rounds, then returns the argmax over everything observed, so the
    result is never worse than the best probe. Non-finite objective
    values are recorded as (current worst - 1) and the search continues.
    """
    config = config or BOConfig()
    if not probes and config.n_extra > 0:
        raise ArgumentError("bo_optimize needs at least one probe to start")
    dim = len(bounds)
    for lo, hi in bounds:
        if not hi > lo:
            raise ArgumentError(f"invalid bounds ({lo}, {hi})")
    rng = np.random.default_rng(config.seed)

    def sanitize(val, seen):
        if np.isfinite(val):
            return float(val)
        worst = min(seen) if seen else 0.0
        return worst - 1.0

    points = []
    ys = []
    for p, val in probes:
        v = sanitize(float(val), ys)
        points.append((tuple(float(x) for x in p), v, "grid"))
        ys.append(v)
    xs = [_normalize(p, bounds) for p, _v, _s in points]

    for _ in range(config.n_extra):
        gp = _GP(np.array(xs), np.array(ys), config.length_scale, config.noise)

        def neg_ucb(x):
            mu, sd = gp.predict(x.reshape(1, -1))
            return -(mu[0] + config.kappa * sd[0])

        cands = rng.uniform(0.0, 1.0, size=(config.acq_starts, dim))
        scores = np.array([neg_ucb(c) for c in cands])
        order = np.argsort(scores)
        best_x, best_score = cands[order[0]], scores[order[0]]
        for idx in order[: config.refine_starts]:
            res = minimize(
                neg_ucb,
                cands[idx],
                method="L-BFGS-B",
                bounds=[(0.0, 1.0)] * dim,
            )
            if res.fun < best_score:
                best_score, best_x = res.fun, np.clip(res.x, 0.0, 1.0)
        suggestion = _denormalize(best_x, bounds)
        val = sanitize(f(*suggestion), ys)
        points.append((suggestion, val, "bo"))
        xs.append(_normalize(suggestion, bounds))
        ys.append(val)

    if not points:
        raise ArgumentError("bo_optimize observed no points")
    best_i = 0
    for i in range(1, len(points)):
        if points[i][1] > points[best_i][1]:
            best_i = i
    return BOResult(params=points[best_i][0], value=points[best_i][1], points=points)
