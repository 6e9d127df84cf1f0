"""Layer-by-layer quantization search with frozen prefixes.

Layers are processed in graph order. For each quantizable layer the
driver sweeps the clipping ratio (grid, then optional GP refinement),
installs the winner, sweeps the rounding parameters the same way,
optionally applies bias correction when it helps, freezes the layer's
state, and moves on. The objective is evaluated on a calibration set;
every evaluation lands in a trace with a deterministic sequence stamp.
"""

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ops as T
from .bayesopt import BOConfig, bo_optimize
from .errors import ArgumentError, DegenerateScaleError
from .model_graph import WEIGHTED_KINDS, forward
from .quant import (
    ActQuantState,
    QuantizationPlan,
    RoundingParams,
    WeightQuantState,
    activation_batch_maxima,
    bias_correction,
    clip_by_gamma,
    grid_limit,
    threshold_from_maxima,
    _round_with_params,
)

log = logging.getLogger(__name__)

METRICS = ("top1_accuracy", "neg_cross_entropy")
PHASES = ("weight_clip", "weight_round", "act_clip", "act_round", "bias")


@dataclass(frozen=True)
class GridSpec:
    gamma_c: tuple = (0.1, 1.0, 0.1)
    gamma_n: tuple = (-1.0, 1.0, 0.1)
    gamma_s: tuple = (0.0, 1.0, 0.25)

    @staticmethod
    def _values(spec):
        start, stop, step = spec
        if step <= 0 or stop < start:
            raise ArgumentError(f"bad grid spec {spec}")
        n = int(round((stop - start) / step))
        vals = [round(start + i * step, 12) for i in range(n + 1)]
        return [v for v in vals if v <= stop + 1e-12]

    def gamma_c_values(self):
        vals = self._values(self.gamma_c)
        if any(not 0.0 < v <= 1.0 for v in vals):
            raise ArgumentError("gamma_c grid must lie in (0, 1]")
        return vals

    def gamma_n_values(self):
        vals = self._values(self.gamma_n)
        if any(not -1.0 <= v <= 1.0 for v in vals):
            raise ArgumentError("gamma_n grid must lie in [-1, 1]")
        return vals

    def gamma_s_values(self):
        vals = self._values(self.gamma_s)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ArgumentError("gamma_s grid must lie in [0, 1]")
        return vals


@dataclass
class QuantizableLayerSet:
    included: list

    @classmethod
    def build(cls, model, include_first=False, only=None, exclude=()):
        weighted = model.weighted_layers()
        if only is not None:
            for i in only:
                if i not in weighted:
                    kind = model.layer(i).kind
                    raise ArgumentError(f"layer {i} has kind {kind}; only conv2d/fc are quantizable")
            sel = sorted(set(only))
        else:
            sel = weighted if include_first else weighted[1:]
        return cls([i for i in sel if i not in set(exclude)])


@dataclass
class TracePoint:
    params: dict
    objective: float
    tiebreak: float
    source: str
    seq: int


@dataclass
class SearchTrace:
    layer: int
    phase: str
    points: list = field(default_factory=list)
    chosen: dict = field(default_factory=dict)


class Objective:
    """Calibration-set objective: top-1 accuracy with a cross-entropy tie-break.

    evaluate() returns (primary, tiebreak); comparisons are lexicographic
    so equal-accuracy candidates are split by lower cross-entropy.
    """

    def __init__(self, model, calib, metric="top1_accuracy", batch_size=64, threads=1):
        if metric not in METRICS:
            raise ArgumentError(f"unknown metric {metric!r}")
        self.model = model
        self.metric = metric
        self.batch_size = batch_size
        self.threads = max(1, threads)
        self.batches = calib.batches(batch_size)

    def _run_batch(self, args):
        b, view, start, prefix_list = args
        x, y = self.batches[b]
        prefix = prefix_list[b] if prefix_list is not None else None
        logits, _ = forward(self.model, x, view, start=start, prefix=prefix)
        correct = int((logits.argmax(axis=1) == y).sum())
        ce_sum = T.cross_entropy(logits, y) * len(y)
        return correct, ce_sum

    def evaluate(self, view=None, start=1, prefix_list=None):
        jobs = [(b, view, start, prefix_list) for b in range(len(self.batches))]
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(self._run_batch, jobs))
        else:
            results = [self._run_batch(j) for j in jobs]
        total = sum(len(y) for _x, y in self.batches)
        correct = sum(r[0] for r in results)
        ce = float(np.float64(sum(np.float64(r[1]) for r in results)) / total)
        acc = correct / total
        if self.metric == "top1_accuracy":
            return acc, -ce
        return -ce, 0.0

    def stats(self, view=None):
        """(top1, cross_entropy) for reporting, full forward."""
        saved = self.metric
        self.metric = "top1_accuracy"
        try:
            acc, neg_ce = self.evaluate(view)
        finally:
            self.metric = saved
        return acc, -neg_ce


def _argmax(points):
    best = None
    for p in points:
        if best is None or (p.objective, p.tiebreak) > (best.objective, best.tiebreak):
            best = p
    return best


def _round_candidates(grid, order):
    if order == "second":
        candidates = [
            {"gamma_n": gn, "gamma_s": gs}
            for gn in grid.gamma_n_values()
            for gs in grid.gamma_s_values()
        ]
        bounds = [(-1.0, 1.0), (0.0, 1.0)]
    else:
        candidates = [{"gamma_n": gn} for gn in grid.gamma_n_values()]
        bounds = [(-1.0, 1.0)]
    return candidates, bounds


class _View:
    """Plan overlay used while evaluating a candidate."""

    def __init__(self, plan, weights=None, acts=None, biases=None):
        self._plan = plan
        self._weights = weights or {}
        self._acts = acts or {}
        self._biases = biases or {}

    def weight(self, i):
        if i in self._weights:
            return self._weights[i]
        return self._plan.weight(i)

    def act(self, i):
        if i in self._acts:
            return self._acts[i]
        return self._plan.act(i)

    def bias(self, i):
        if i in self._biases:
            return self._biases[i]
        return self._plan.bias(i)


class _Driver:
    def __init__(self, model, calib, layers, grid, bo, objective, q_w, q_a, order, bias):
        self.model = model
        self.calib = calib
        self.layers = layers
        self.grid = grid
        self.bo = bo
        self.objective = objective
        self.q_w = q_w
        self.q_a = q_a
        self.order = order
        self.bias_enabled = bias
        self.plan = QuantizationPlan(model)
        self.traces = []
        self.clock = itertools.count()

    def _phase_bo(self, layer_i, phase):
        offset = layer_i * 10 + PHASES.index(phase)
        return replace(self.bo, seed=self.bo.seed * 100000 + offset)

    def _eval_candidate(self, view, layer_i, prefix_list):
        start = layer_i if prefix_list is not None or layer_i == 1 else 1
        return self.objective.evaluate(view, start=start, prefix_list=prefix_list)

    def _run_phase(self, layer_i, phase, candidates, make_view, bounds, prefix_list):
        """Grid sweep + optional BO refinement; returns (trace, best point)."""
        trace = SearchTrace(layer=layer_i, phase=phase)

        def eval_point(params_dict, source):
            view = make_view(params_dict)
            primary, tiebreak = self._eval_candidate(view, layer_i, prefix_list)
            point = TracePoint(dict(params_dict), primary, tiebreak, source, next(self.clock))
            trace.points.append(point)
            return point

        names = list(candidates[0].keys())
        for cand in candidates:
            eval_point(cand, "grid")
        if self.bo.n_extra > 0:
            probes = [(tuple(p.params[n] for n in names), p.objective) for p in trace.points]

            def f(*values):
                return eval_point(dict(zip(names, values)), "bo").objective

            bo_optimize(f, bounds, probes, self._phase_bo(layer_i, phase))
        best = _argmax(trace.points)
        trace.chosen = {"params": dict(best.params), "objective": best.objective, "tiebreak": best.tiebreak}
        self.traces.append(trace)
        log.info("layer %d %s: chose %s (objective %.6f)", layer_i, phase, best.params, best.objective)
        return trace, best

    def _skip(self, layer_i, phase, reason):
        log.warning("layer %d %s skipped: %s", layer_i, phase, reason)
        self.traces.append(SearchTrace(layer=layer_i, phase=phase, chosen={"skipped": reason}))

    def _prefix(self, layer_i):
        if layer_i == 1:
            return None
        needed = {layer_i - 1}
        for layer in self.model.layers[layer_i - 1 :]:
            if layer.kind == "add" and layer.skip_from < layer_i:
                needed.add(layer.skip_from)
        out = []
        for x, _y in self.objective.batches:
            _, cap = forward(self.model, x, self.plan, capture=needed, stop=layer_i - 1)
            out.append(cap)
        return out

    def weight_quant_phase(self, layer_i, prefix_list):
        layer = self.model.layer(layer_i)
        w = layer.weights
        wmax = float(np.abs(w).max()) if w.size else 0.0
        if wmax == 0.0:
            self._skip(layer_i, "weight_clip", "degenerate scale (all-zero weights)")
            return

        def clip_view(params):
            th = params["gamma_c"] * wmax
            w_c = np.clip(w.astype(np.float64), -th, th).astype(np.float32)
            return _View(self.plan, weights={layer_i: w_c})

        candidates = [{"gamma_c": v} for v in self.grid.gamma_c_values()]
        _, best = self._run_phase(layer_i, "weight_clip", candidates, clip_view, [(0.01, 1.0)], prefix_list)
        gamma_c = best.params["gamma_c"]
        w_c, th, s = clip_by_gamma(w, gamma_c, self.q_w)

        if self.order == "rtn":
            params = RoundingParams("rtn")
        else:

            def round_view(params):
                rp = RoundingParams(self.order, params["gamma_n"], params.get("gamma_s", 0.0))
                w_q = _round_with_params(w_c, s, rp, self.q_w)
                return _View(self.plan, weights={layer_i: w_q})

            candidates, bounds = _round_candidates(self.grid, self.order)
            _, best = self._run_phase(layer_i, "weight_round", candidates, round_view, bounds, prefix_list)
            params = RoundingParams(self.order, best.params["gamma_n"], best.params.get("gamma_s", 0.0))
        st = self.plan.ensure(layer_i, self.q_w)
        st.weight = WeightQuantState(gamma_c, s, th, params)
        self.plan.install_weights(layer_i, _round_with_params(w_c, s, params, self.q_w))

    def act_quant_phase(self, layer_i, prefix_list):
        maxima = activation_batch_maxima(
            self.model, layer_i, self.objective.batches, self.plan, prefix_list
        )
        if max(maxima) == 0.0:
            self._skip(layer_i, "act_clip", "degenerate scale (all-zero activations)")
            return

        def clip_view(params):
            _th, sx = threshold_from_maxima(maxima, params["gamma_c"], self.q_a)
            state = ActQuantState(params["gamma_c"], sx, RoundingParams("rtn"), self.q_a)
            return _View(self.plan, acts={layer_i: state})

        candidates = [{"gamma_c": v} for v in self.grid.gamma_c_values()]
        _, best = self._run_phase(layer_i, "act_clip", candidates, clip_view, [(0.01, 1.0)], prefix_list)
        gamma_c = best.params["gamma_c"]
        _th, sx = threshold_from_maxima(maxima, gamma_c, self.q_a)

        if self.order == "rtn":
            params = RoundingParams("rtn")
        else:

            def round_view(params):
                rp = RoundingParams(self.order, params["gamma_n"], params.get("gamma_s", 0.0))
                return _View(self.plan, acts={layer_i: ActQuantState(gamma_c, sx, rp, self.q_a)})

            candidates, bounds = _round_candidates(self.grid, self.order)
            _, best = self._run_phase(layer_i, "act_round", candidates, round_view, bounds, prefix_list)
            params = RoundingParams(self.order, best.params["gamma_n"], best.params.get("gamma_s", 0.0))
        st = self.plan.ensure(layer_i, self.q_w)
        st.activation = ActQuantState(gamma_c, sx, params, self.q_a)

    def bias_corr_phase(self, layer_i, prefix_list):
        layer = self.model.layer(layer_i)
        delta = bias_correction(
            self.model, layer_i, self.calib, self.plan, batch_size=self.objective.batch_size
        )
        trace = SearchTrace(layer=layer_i, phase="bias")
        off_primary, off_tie = self._eval_candidate(self.plan, layer_i, prefix_list)
        trace.points.append(
            TracePoint({"bias_corrected": False}, off_primary, off_tie, "grid", next(self.clock))
        )
        base = layer.bias if layer.bias is not None else np.zeros(delta.shape, dtype=np.float32)
        view = _View(self.plan, biases={layer_i: base + delta})
        on_primary, on_tie = self._eval_candidate(view, layer_i, prefix_list)
        trace.points.append(
            TracePoint({"bias_corrected": True}, on_primary, on_tie, "grid", next(self.clock))
        )
        applied = (on_primary, on_tie) > (off_primary, off_tie)
        st = self.plan.ensure(layer_i, self.q_w)
        if applied:
            st.bias_corrected = True
            st.bias_delta = delta
        trace.chosen = {
            "params": {"bias_corrected": applied},
            "objective": on_primary if applied else off_primary,
            "tiebreak": on_tie if applied else off_tie,
        }
        self.traces.append(trace)
        log.info("layer %d bias correction %s", layer_i, "applied" if applied else "rejected")

    def run(self):
        for layer_i in self.layers.included:
            prefix_list = self._prefix(layer_i)
            self.weight_quant_phase(layer_i, prefix_list)
            self.act_quant_phase(layer_i, prefix_list)
            if self.bias_enabled:
                self.bias_corr_phase(layer_i, prefix_list)
            if layer_i in self.plan.states:
                self.plan.freeze_layer(layer_i)
        return self.plan, self.traces


def run_qrater(
    model,
    calib,
    layers=None,
    grid=None,
    bo=None,
    objective=None,
    *,
    q_w=8,
    q_a=None,
    order="second",
    bias=True,
):
    """Full search pipeline; returns (plan, traces).

    layers defaults to every weighted layer except the first; order is
    the rounding family used for both weights and activations.
    """
    if order not in ("rtn", "first", "second"):
        raise ArgumentError(f"rounding order must be rtn, first, or second, got {order!r}")
    grid_limit(q_w)
    q_a = q_w if q_a is None else q_a
    grid_limit(q_a)
    layers = layers or QuantizableLayerSet.build(model)
    grid = grid or GridSpec()
    bo = bo or BOConfig()
    objective = objective or Objective(model, calib)
    driver = _Driver(model, calib, layers, grid, bo, objective, q_w, q_a, order, bias)
    return driver.run()


def run_baseline(model, calib, selector, layers=None, *, q_w=8, q_a=None, batch_size=64):
    """Selector + round-to-nearest pipeline (no search, no bias correction).

    selector(tensor, q) -> threshold. Weights use the selector directly;
    activation thresholds come from the selector applied to the pooled
    layer inputs under the accumulating plan. Returns a QuantizationPlan.
    """
    grid_limit(q_w)
    q_a = q_w if q_a is None else q_a
    layers = layers or QuantizableLayerSet.build(model)
    plan = QuantizationPlan(model)
    batches = calib.batches(batch_size)
    for layer_i in layers.included:
        layer = model.layer(layer_i)
        w = layer.weights
        wmax = float(np.abs(w).max()) if w.size else 0.0
        if wmax == 0.0:
            log.warning("baseline: layer %d skipped (all-zero weights)", layer_i)
            continue
        th = selector(w, q_w)
        gamma_c = min(th / wmax, 1.0)
        w_c, th_eff, s = clip_by_gamma(w, gamma_c, q_w)
        st = plan.ensure(layer_i, q_w)
        st.weight = WeightQuantState(gamma_c, s, th_eff, RoundingParams("rtn"))
        plan.install_weights(layer_i, _round_with_params(w_c, s, st.weight.params, q_w))

        pooled = []
        for b, (x, _y) in enumerate(batches):
            if layer_i == 1:
                pooled.append(np.asarray(x, dtype=np.float32).reshape(-1))
            else:
                _, cap = forward(model, x, plan, capture={layer_i - 1}, stop=layer_i - 1)
                pooled.append(cap[layer_i - 1].reshape(-1))
        pooled = np.concatenate(pooled)
        amax = float(np.abs(pooled).max()) if pooled.size else 0.0
        if amax == 0.0:
            log.warning("baseline: layer %d activations all zero; skipping", layer_i)
            plan.freeze_layer(layer_i)
            continue
        th_a = selector(pooled, q_a)
        sx = th_a / grid_limit(q_a)
        st.activation = ActQuantState(min(th_a / amax, 1.0), sx, RoundingParams("rtn"), q_a)
        plan.freeze_layer(layer_i)
    return plan


def sweep_phase(
    model,
    calib,
    layer_i,
    phase,
    plan=None,
    grid=None,
    *,
    q_w=8,
    q_a=None,
    order="second",
    gamma_c=None,
    batch_size=64,
    threads=1,
    metric="top1_accuracy",
):
    """Evaluate one phase's full grid for a layer without installing anything.

    plan supplies frozen earlier-layer states. Rounding-phase sweeps need
    a clipping ratio: pass gamma_c, or the grid argmax of the matching
    clip sweep is used. Returns a list of row dicts (params + objective).
    """
    if phase not in ("weight_clip", "weight_round", "act_clip", "act_round"):
        raise ArgumentError(f"unknown sweep phase {phase!r}")
    if order == "rtn" and phase.endswith("_round"):
        raise ArgumentError("round-to-nearest has no rounding parameters to sweep")
    if model.layer(layer_i).kind not in WEIGHTED_KINDS:
        kind = model.layer(layer_i).kind
        raise ArgumentError(f"layer {layer_i} has kind {kind}; only conv2d/fc are quantizable")
    grid_limit(q_w)
    q_a = q_w if q_a is None else q_a
    grid = grid or GridSpec()
    plan = plan or QuantizationPlan(model)
    objective = Objective(model, calib, metric=metric, batch_size=batch_size, threads=threads)
    driver = _Driver(
        model, calib, QuantizableLayerSet([]), grid, BOConfig(n_extra=0), objective, q_w, q_a, order, False
    )
    driver.plan = plan
    prefix_list = driver._prefix(layer_i)

    def run(candidates, make_view):
        rows = []
        for cand in candidates:
            view = make_view(cand)
            primary, tiebreak = driver._eval_candidate(view, layer_i, prefix_list)
            row = dict(cand)
            row["objective"] = primary
            rows.append((row, tiebreak))
        return rows

    layer = model.layer(layer_i)
    if phase in ("weight_clip", "weight_round"):
        w = layer.weights
        wmax = float(np.abs(w).max())
        if wmax == 0.0:
            raise DegenerateScaleError(f"layer {layer_i} weights are all zero")
        if phase == "weight_clip":
            def make_view(params):
                th = params["gamma_c"] * wmax
                w_c = np.clip(w.astype(np.float64), -th, th).astype(np.float32)
                return _View(plan, weights={layer_i: w_c})

            rows = run([{"gamma_c": v} for v in grid.gamma_c_values()], make_view)
            return [r for r, _t in rows]
        if gamma_c is None:
            clip_rows = sweep_phase(
                model, calib, layer_i, "weight_clip", plan, grid,
                q_w=q_w, q_a=q_a, order=order, batch_size=batch_size, threads=threads, metric=metric,
            )
            gamma_c = max(clip_rows, key=lambda r: r["objective"])["gamma_c"]
        w_c, _th, s = clip_by_gamma(w, gamma_c, q_w)

        def make_view(params):
            rp = RoundingParams(order, params["gamma_n"], params.get("gamma_s", 0.0))
            return _View(plan, weights={layer_i: _round_with_params(w_c, s, rp, q_w)})

        candidates, _bounds = _round_candidates(grid, order)
        return [r for r, _t in run(candidates, make_view)]

    maxima = activation_batch_maxima(model, layer_i, objective.batches, plan, prefix_list)
    if max(maxima) == 0.0:
        raise DegenerateScaleError(f"layer {layer_i} input activations are all zero")
    if phase == "act_clip":
        def make_view(params):
            _th, sx = threshold_from_maxima(maxima, params["gamma_c"], q_a)
            return _View(plan, acts={layer_i: ActQuantState(params["gamma_c"], sx, RoundingParams("rtn"), q_a)})

        rows = run([{"gamma_c": v} for v in grid.gamma_c_values()], make_view)
        return [r for r, _t in rows]
    if gamma_c is None:
        clip_rows = sweep_phase(
            model, calib, layer_i, "act_clip", plan, grid,
            q_w=q_w, q_a=q_a, order=order, batch_size=batch_size, threads=threads, metric=metric,
        )
        gamma_c = max(clip_rows, key=lambda r: r["objective"])["gamma_c"]
    _th, sx = threshold_from_maxima(maxima, gamma_c, q_a)

    def make_view(params):
        rp = RoundingParams(order, params["gamma_n"], params.get("gamma_s", 0.0))
        return _View(plan, acts={layer_i: ActQuantState(gamma_c, sx, rp, q_a)})

    candidates, _bounds = _round_candidates(grid, order)
    return [r for r, _t in run(candidates, make_view)]


def write_trace_jsonl(traces, path):
    """One JSON record per evaluated point, in evaluation order."""
    records = []
    for trace in traces:
        for p in trace.points:
            records.append(
                {
                    "layer": trace.layer,
                    "phase": trace.phase,
                    "params": {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in p.params.items()},
                    "objective": float(p.objective),
                    "source": p.source,
                    "timestamp": p.seq,
                }
            )
    records.sort(key=lambda r: r["timestamp"])
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
