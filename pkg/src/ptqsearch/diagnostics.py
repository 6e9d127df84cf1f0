"""Loss-landscape probes: weight interpolation and error/loss correlation.

The trajectory tool walks the straight line between two weight sets,
records the calibration cross-entropy at each sample, and flags chord
violations of convexity. The correlation tool quantizes one layer under
many configurations and reports how squared weight error relates to the
calibration loss.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .errors import ArgumentError
from .model_graph import forward
from .quant import clip_by_gamma, RoundingParams, _round_with_params

CONVEXITY_TOL = 1e-9


@dataclass
class TrajectoryReport:
    alphas: list
    losses: list
    violations: list = field(default_factory=list)  # (lambda, left index, right index)


class _WeightOverlay:
    def __init__(self, weights):
        self._weights = weights

    def weight(self, i):
        return self._weights.get(i)

    def act(self, i):
        return None

    def bias(self, i):
        return None


def _calib_loss(model, weights, calib, batch_size=64):
    view = _WeightOverlay(weights)
    total = 0
    ce_sum = 0.0
    for x, y in calib.batches(batch_size):
        logits, _ = forward(model, x, view)
        ce_sum += T.cross_entropy(logits, y) * len(y)
        total += len(y)
    return float(np.float64(ce_sum) / total)


def find_convexity_violations(alphas, losses, tol=CONVEXITY_TOL):
    """Chord test over every interior triple of sampled points.

    For indices a < m < b the loss at m must not exceed the chord
    between a and b by more than tol. Returns (lambda, a, b) triples
    where lambda places m on the chord: alpha_m = lambda * alpha_a +
    (1 - lambda) * alpha_b.
    """
    n = len(alphas)
    if n != len(losses):
        raise ArgumentError("alphas and losses differ in length")
    violations = []
    for a in range(n - 2):
        for b in range(a + 2, n):
            span = alphas[b] - alphas[a]
            if span <= 0:
                raise ArgumentError("alphas must be strictly increasing")
            for m in range(a + 1, b):
                lam = (alphas[b] - alphas[m]) / span
                chord = lam * losses[a] + (1.0 - lam) * losses[b]
                if losses[m] > chord + tol:
                    violations.append((lam, a, b))
    return violations


def second_difference_convex(losses, tol=CONVEXITY_TOL):
    """Discrete convexity on a uniform grid: all second differences >= -tol."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size < 3:
        return True
    d2 = arr[2:] - 2.0 * arr[1:-1] + arr[:-2]
    return bool((d2 >= -tol).all())


def interpolate_trajectory(model, w1, w2, n_points, calib, batch_size=64, tol=CONVEXITY_TOL):
    """Evaluate loss along (1-alpha) * W1 + alpha * W2 for alpha in [0, 1].

    w1/w2 map layer index -> weight array; layers absent from both maps
    keep their stored weights. Exact endpoints evaluate the endpoint
    arrays directly so alpha = 0 and alpha = 1 reproduce W1 and W2
    bit-for-bit.
    """
    if n_points < 2:
        raise ArgumentError(f"n_points must be >= 2, got {n_points}")
    keys = sorted(set(w1) | set(w2))
    for k in keys:
        if k not in w1 or k not in w2:
            raise ArgumentError(f"layer {k} present in only one endpoint")
        if w1[k].shape != w2[k].shape:
            raise ArgumentError(f"layer {k} endpoint shapes differ: {w1[k].shape} vs {w2[k].shape}")
    alphas = [i / (n_points - 1) for i in range(n_points)]
    losses = []
    for alpha in alphas:
        if alpha == 0.0:
            weights = dict(w1)
        elif alpha == 1.0:
            weights = dict(w2)
        else:
            a32 = np.float32(alpha)
            one_minus = np.float32(1.0 - alpha)
            weights = {k: one_minus * w1[k] + a32 * w2[k] for k in keys}
        losses.append(_calib_loss(model, weights, calib, batch_size))
    violations = find_convexity_violations(alphas, losses, tol)
    return TrajectoryReport(alphas=alphas, losses=losses, violations=violations)


def plan_weight_set(model, plan, layers=None):
    """Materialized weight map for trajectory endpoints (quantized where planned)."""
    layers = layers if layers is not None else model.weighted_layers()
    out = {}
    for i in layers:
        w = plan.weight(i) if plan is not None else None
        out[i] = w if w is not None else model.layer(i).weights
    return out


def pearson_r(x, y):
    """Plain Pearson correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ArgumentError("pearson_r needs two equal-length vectors of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


@dataclass
class CorrelationReport:
    qerrs: list
    losses: list
    configs: list
    r: object  # float, or None with a reason
    note: str = ""


def correlation_study(model, layer_i, configs, calib, batch_size=64):
    """Quantize one layer many ways; relate weight error to calibration loss.

    configs: iterable of dicts with q, gamma_c, gamma_n, gamma_s, order.
    Returns per-config (sum squared weight error, loss) plus Pearson r;
    r is None with a note when either column has zero variance.
    """
    layer = model.layer(layer_i)
    if layer.kind not in ("conv2d", "fc"):
        raise ArgumentError(f"layer {layer_i} has kind {layer.kind}; need conv2d or fc")
    configs = list(configs)
    if len(configs) < 3:
        raise ArgumentError(f"need at least 3 configs, got {len(configs)}")
    w = layer.weights
    qerrs = []
    losses = []
    kept = []
    for cfg in configs:
        params = RoundingParams(
            cfg.get("order", "second"), cfg.get("gamma_n", 0.0), cfg.get("gamma_s", 0.0)
        )
        w_c, _th, s = clip_by_gamma(w, cfg["gamma_c"], cfg["q"])
        w_q = _round_with_params(w_c, s, params, cfg["q"])
        err = (w.astype(np.float64) - w_q.astype(np.float64)) ** 2
        qerrs.append(float(err.sum()))
        losses.append(_calib_loss(model, {layer_i: w_q}, calib, batch_size))
        kept.append(dict(cfg))
    r = pearson_r(qerrs, losses)
    note = "" if r is not None else "zero variance in qerr or loss; correlation undefined"
    return CorrelationReport(qerrs=qerrs, losses=losses, configs=kept, r=r, note=note)
