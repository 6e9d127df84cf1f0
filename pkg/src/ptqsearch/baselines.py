"""Reference clipping-threshold selectors: MSE sweep, KL histogram, Laplace fit.

Each selector maps a weight (or pooled activation) tensor and a bit
width to a clipping threshold in (0, max|w|]. They exist as baselines
for the search-based pipeline and as calibrators in their own right.
"""

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ArgumentError, DegenerateScaleError
from .quant import grid_limit, round_rtn


def _abs_max(w):
    w = np.asarray(w, dtype=np.float32)
    wmax = float(np.abs(w).max()) if w.size else 0.0
    if wmax == 0.0:
        raise DegenerateScaleError("all-zero tensor has no clipping threshold")
    return w, wmax


def _rtn_sq_error(w, th, q):
    lim = grid_limit(q)
    s = th / lim
    w64 = w.astype(np.float64)
    w_c = np.clip(w64, -th, th)
    k = np.clip(round_rtn(w_c, s), -lim, lim)
    err = w64 - k * s
    return float(np.dot(err, err))


def clip_mse(w, q, num_candidates=100):
    """Threshold minimizing the round-trip squared error over a uniform sweep.

    Candidates are {k/num_candidates * max|w|, k = 1..num_candidates};
    the first scanned minimum wins ties.
    """
    if num_candidates < 2:
        raise ArgumentError(f"num_candidates must be >= 2, got {num_candidates}")
    w, wmax = _abs_max(w)
    flat = w.reshape(-1)
    best_th, best_err = None, np.inf
    for k in range(1, num_candidates + 1):
        th = k / num_candidates * wmax
        err = _rtn_sq_error(flat, th, q)
        if err < best_err:
            best_th, best_err = th, err
    return best_th


def _requantize_histogram(counts, levels):
    """Coarsen counts to `levels` contiguous groups, then expand back.

    Group mass is spread evenly over the group's originally nonzero
    bins; with levels >= len(counts) this is the identity.
    """
    n = len(counts)
    if levels >= n:
        return counts.astype(np.float64)
    out = np.zeros(n, dtype=np.float64)
    bounds = [g * n // levels for g in range(levels + 1)]
    for g in range(levels):
        lo, hi = bounds[g], bounds[g + 1]
        if lo == hi:
            continue
        group = counts[lo:hi]
        nz = group > 0
        n_nz = int(nz.sum())
        if n_nz:
            out[lo:hi][nz] = group[group > 0].sum() / n_nz
    return out


def clip_kl(w, q, bins=2048, num_candidates=100, epsilon=1e-12):
    """Threshold minimizing KL(P || Q) over the |w| histogram.

    P is the clipped distribution with outlier mass folded into its edge
    bin; Q is the clipped histogram coarsened to 2^(q-1)-1 levels and
    expanded back. Candidate thresholds are snapped to bin edges.
    """
    if num_candidates < 2:
        raise ArgumentError(f"num_candidates must be >= 2, got {num_candidates}")
    if bins < 2:
        raise ArgumentError(f"bins must be >= 2, got {bins}")
    w, wmax = _abs_max(w)
    mags = np.abs(w.reshape(-1).astype(np.float64))
    counts, _ = np.histogram(mags, bins=bins, range=(0.0, wmax))
    counts = counts.astype(np.float64)
    levels = grid_limit(q)
    suffix = np.concatenate([np.cumsum(counts[::-1])[::-1], [0.0]])
    best_th, best_kl = None, np.inf
    seen = set()
    for k in range(1, num_candidates + 1):
        i = max(1, round(k * bins / num_candidates))
        if i in seen:
            continue
        seen.add(i)
        p = counts[:i].copy()
        p[i - 1] += suffix[i]
        if p.sum() == 0.0:
            continue
        quant = _requantize_histogram(counts[:i], levels)
        if quant.sum() == 0.0:
            continue
        p_n = (p + epsilon) / (p + epsilon).sum()
        q_n = (quant + epsilon) / (quant + epsilon).sum()
        kl = float(np.sum(p_n * np.log(p_n / q_n)))
        if kl < best_kl:
            best_kl, best_th = kl, i * (wmax / bins)
    if best_th is None:
        raise DegenerateScaleError("histogram had no mass below any candidate threshold")
    return best_th


def _laplace_expected_sq_error(th, q):
    """Exact E[(x - Q(x))^2] for x ~ Laplace(0, 1) under q-bit clipping at th.

    Uses the closed-form antiderivative of (x - c)^2 e^(-x); cells are
    the rounding intervals of the positive half-axis, doubled.
    """
    lim = grid_limit(q)
    s = th / lim

    def cell(a, b, c):
        # integral of (x - c)^2 * 0.5 * exp(-x) dx over [a, b]
        def F(x):
            d = x - c
            return -np.exp(-x) * (d * d + 2 * d + 2)

        return 0.5 * (F(b) - F(a))

    total = cell(0.0, 0.5 * s, 0.0)
    for k in range(1, lim):
        total += cell((k - 0.5) * s, (k + 0.5) * s, k * s)
    # saturation cell: everything above (lim - 0.5) s maps to th
    d = (lim - 0.5) * s - th
    total += 0.5 * np.exp(-(lim - 0.5) * s) * (d * d + 2 * d + 2)
    return 2.0 * total


def _laplace_optimal_ratio(q):
    res = minimize_scalar(
        lambda t: _laplace_expected_sq_error(t, q),
        bounds=(0.25, 40.0),
        method="bounded",
        options={"xatol": 1e-8},
    )
    return float(res.x)


_ACIQ_CACHE = {}


def clip_aciq(w, q):
    """Laplace-fit threshold: b = mean|w - median(w)|, Th = ratio(q) * b.

    ratio(q) comes from numerically minimizing the exact expected
    squared quantization error under a unit Laplace; the result is
    capped at max|w|.
    """
    w, wmax = _abs_max(w)
    flat = w.reshape(-1).astype(np.float64)
    b = float(np.mean(np.abs(flat - np.median(flat))))
    if b == 0.0:
        raise DegenerateScaleError("zero dispersion; Laplace fit undefined")
    if q not in _ACIQ_CACHE:
        _ACIQ_CACHE[q] = _laplace_optimal_ratio(q)
    return min(_ACIQ_CACHE[q] * b, wmax)


SELECTORS = {"mse": clip_mse, "kl": clip_kl, "aciq": clip_aciq}
