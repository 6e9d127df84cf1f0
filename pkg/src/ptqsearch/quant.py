"""Symmetric uniform quantization with sign-aware rounding offsets.

The grid for q bits is {k * s : |k| <= 2^(q-1) - 1} with no zero point.
Rounding supports plain round-to-nearest plus two learned perturbation
schemes that bias the rounding decision as a function of the magnitude
of the rounded integer: a monotone one-parameter form (gamma_n) and a
two-parameter form that additionally places a pivot inside the grid
(gamma_s). All elementwise math runs in float64; quantized tensors are
stored as float32 on-grid values.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ArgumentError, DegenerateScaleError, DimensionError, FormatError


def grid_limit(q):
    if not isinstance(q, (int, np.integer)) or q < 2:
        raise ArgumentError(f"bit width must be an integer >= 2, got {q!r}")
    return 2 ** (q - 1) - 1


def clip_by_gamma(w, gamma_c, q):
    """Clip to Th = gamma_c * max|w| and derive the grid scale.

    Returns (w_c, Th_c, s). gamma_c must lie in (0, 1]; an all-zero
    tensor has no usable scale and raises DegenerateScaleError.
    """
    if not 0.0 < gamma_c <= 1.0:
        raise ArgumentError(f"gamma_c must be in (0, 1], got {gamma_c}")
    lim = grid_limit(q)
    w = np.asarray(w, dtype=np.float32)
    wmax = float(np.abs(w).max()) if w.size else 0.0
    if wmax == 0.0:
        raise DegenerateScaleError("all-zero tensor has no quantization scale")
    th = gamma_c * wmax
    s = th / lim
    w_c = np.clip(w.astype(np.float64), -th, th).astype(np.float32)
    return w_c, th, s


def round_rtn(w_c, s):
    """Round-to-nearest integer on the grid: floor(w_c / s + 0.5)."""
    if s <= 0.0:
        raise DegenerateScaleError(f"scale must be positive, got {s}")
    return np.floor(np.asarray(w_c, dtype=np.float64) / s + 0.5)


def rounding_offset_first(w_c, s, gamma_n):
    """Offset f_r = 0.5 * sign(w_c * gamma_n) * |gamma_n|^|w_r|."""
    if not -1.0 <= gamma_n <= 1.0:
        raise ArgumentError(f"gamma_n must be in [-1, 1], got {gamma_n}")
    w_c = np.asarray(w_c, dtype=np.float64)
    w_r = round_rtn(w_c, s)
    # 0^0 = 1 here, which numpy's power already honors
    return 0.5 * np.sign(w_c * gamma_n) * np.abs(gamma_n) ** np.abs(w_r)


def rounding_offset_second(w_c, s, gamma_n, gamma_s, q):
    """Pivoted offset: sign flips around gamma_s * 2^(q-1), decay from beta = 2^(q-2)."""
    if not -1.0 <= gamma_n <= 1.0:
        raise ArgumentError(f"gamma_n must be in [-1, 1], got {gamma_n}")
    if not 0.0 <= gamma_s <= 1.0:
        raise ArgumentError(f"gamma_s must be in [0, 1], got {gamma_s}")
    lim = grid_limit(q)  # validates q
    del lim
    w_c = np.asarray(w_c, dtype=np.float64)
    w_r = round_rtn(w_c, s)
    pivot = gamma_s * 2.0 ** (q - 1)
    beta = 2.0 ** (q - 2)
    sign_term = np.sign(w_c * gamma_n * (pivot - np.abs(w_r)))
    expo = np.abs(np.abs(np.abs(w_r) - pivot) - beta)
    return 0.5 * sign_term * np.abs(gamma_n) ** expo


def _dequant(codes, s, q):
    lim = grid_limit(q)
    k = np.clip(codes, -lim, lim)
    return (k * np.float64(s)).astype(np.float32)


def round_first_order(w_c, s, gamma_n, q):
    """Quantize with the one-parameter offset; returns on-grid float32 values."""
    f_r = rounding_offset_first(w_c, s, gamma_n)
    codes = np.floor(np.asarray(w_c, dtype=np.float64) / s + 0.5 + f_r)
    return _dequant(codes, s, q)


def round_second_order(w_c, s, gamma_n, gamma_s, q):
    """Quantize with the pivoted offset; returns on-grid float32 values."""
    f_r = rounding_offset_second(w_c, s, gamma_n, gamma_s, q)
    codes = np.floor(np.asarray(w_c, dtype=np.float64) / s + 0.5 + f_r)
    return _dequant(codes, s, q)


@dataclass
class RoundingParams:
    order: str = "rtn"  # rtn | first | second
    gamma_n: float = 0.0
    gamma_s: float = 0.0

    def __post_init__(self):
        if self.order not in ("rtn", "first", "second"):
            raise ArgumentError(f"unknown rounding order {self.order!r}")


def _round_with_params(w_c, s, params, q):
    if params.order == "rtn" or params.gamma_n == 0.0:
        return _dequant(round_rtn(w_c, s), s, q)
    if params.order == "first":
        return round_first_order(w_c, s, params.gamma_n, q)
    return round_second_order(w_c, s, params.gamma_n, params.gamma_s, q)


@dataclass
class WeightQuantState:
    gamma_c: float
    scale: float
    threshold: float
    params: RoundingParams


@dataclass
class ActQuantState:
    gamma_c: float
    scale: float  # S_x, frozen at calibration time
    params: RoundingParams
    q: int


class _Frozen:
    """Mutation guard mixin: freeze() makes attribute writes an error."""

    def freeze(self):
        object.__setattr__(self, "_frozen", True)

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False):
            raise ArgumentError(f"{type(self).__name__} is frozen; cannot set {name}")
        object.__setattr__(self, name, value)


@dataclass
class LayerQuantState(_Frozen):
    q: int
    weight: Optional[WeightQuantState] = None
    activation: Optional[ActQuantState] = None
    bias_corrected: bool = False
    bias_delta: Optional[np.ndarray] = None

    @property
    def frozen(self):
        return getattr(self, "_frozen", False)


def quantize_weights(w, state, q=None):
    """Clip by the state's gamma_c, then round with its params.

    q defaults to the enclosing layer state's bit width when state is a
    LayerQuantState; pass q explicitly when handing a WeightQuantState.
    """
    if isinstance(state, LayerQuantState):
        q = state.q
        state = state.weight
        if state is None:
            raise ArgumentError("layer state carries no weight quantization")
    if q is None:
        raise ArgumentError("bit width q required")
    w_c, th, s = clip_by_gamma(w, state.gamma_c, q)
    return _round_with_params(w_c, s, state.params, q)


def quantize_activation(x, scale, params, q):
    """Fake-quantize activations with a fixed calibrated scale."""
    if scale <= 0.0:
        raise DegenerateScaleError(f"activation scale must be positive, got {scale}")
    lim = grid_limit(q)
    th = np.float64(scale) * lim
    x_c = np.clip(np.asarray(x, dtype=np.float64), -th, th).astype(np.float32)
    return _round_with_params(x_c, float(scale), params, q)


def activation_batch_maxima(model, layer_i, calib_batches, plan=None, prefix_list=None):
    """Per-batch max|input| of a layer under the given plan.

    prefix_list, when given, must hold per-batch prefix dicts containing
    the output of layer_i - 1 (search driver fast path).
    """
    from .model_graph import forward

    maxima = []
    for b, (x, _y) in enumerate(calib_batches):
        if layer_i == 1:
            x_in = np.asarray(x, dtype=np.float32)
        elif prefix_list is not None:
            x_in = prefix_list[b][layer_i - 1]
        else:
            _, cap = forward(model, x, plan, capture={layer_i - 1}, stop=layer_i - 1)
            x_in = cap[layer_i - 1]
        maxima.append(float(np.abs(x_in).max()))
    return maxima


def threshold_from_maxima(maxima, gamma_c, q):
    """Th = mean_j(gamma_c * max|x_j|); returns (Th, S_x)."""
    if not maxima:
        raise ArgumentError("no calibration batches")
    th = float(np.mean(np.float64(gamma_c) * np.asarray(maxima, dtype=np.float64)))
    if th == 0.0:
        raise DegenerateScaleError("activations are identically zero; no scale")
    return th, th / grid_limit(q)


def calibrate_activation_threshold(model, layer_i, calib, gamma_c, q, plan=None, batch_size=64):
    """Averaged per-batch maxima rule for the activation threshold."""
    if not 0.0 < gamma_c <= 1.0:
        raise ArgumentError(f"gamma_c must be in (0, 1], got {gamma_c}")
    maxima = activation_batch_maxima(model, layer_i, calib.batches(batch_size), plan)
    return threshold_from_maxima(maxima, gamma_c, q)


def _channel_mean(y):
    # conv outputs (N, F, H, W) reduce over batch and space; fc (N, D) over batch
    y = y.astype(np.float64)
    if y.ndim == 4:
        return y.sum(axis=(0, 2, 3)), y.shape[0] * y.shape[2] * y.shape[3]
    if y.ndim == 2:
        return y.sum(axis=0), y.shape[0]
    raise DimensionError(f"expected conv or fc output, got shape {y.shape}")


def bias_correction(model, layer_i, calib, plan, batch_size=64):
    """Per-channel mean difference between clean and quantized pre-activations.

    Returns the float32 delta the caller should add to the layer's bias
    (treat a missing bias as zeros). The clean side runs the model with
    no quantization at all; the quantized side runs under the plan.
    """
    from .model_graph import forward

    layer = model.layer(layer_i)
    if layer.kind not in ("conv2d", "fc"):
        raise ArgumentError(f"layer {layer_i} has kind {layer.kind}; bias correction needs conv2d or fc")
    sum_full = None
    sum_quant = None
    total = 0
    for x, _y in calib.batches(batch_size):
        _, cap_full = forward(model, x, None, capture={layer_i}, stop=layer_i)
        _, cap_quant = forward(model, x, plan, capture={layer_i}, stop=layer_i)
        sf, n = _channel_mean(cap_full[layer_i])
        sq, _ = _channel_mean(cap_quant[layer_i])
        sum_full = sf if sum_full is None else sum_full + sf
        sum_quant = sq if sum_quant is None else sum_quant + sq
        total += n
    delta = (sum_full - sum_quant) / total
    return delta.astype(np.float32)


def integer_consistency_check(w_q, x_q, s_w, s_x, q, rel_tol=1e-6):
    """Integer-domain matmul of the recovered codes vs the float fake-quant product.

    Both inputs must already sit on their grids; off-grid values are an
    argument error. Returns True when the rescaled integer product
    matches the float path within rel_tol relative error.
    """
    from .tensor_ops import matmul

    float_prod = matmul(w_q, x_q).astype(np.float64)  # validates shapes up front
    lim = grid_limit(q)
    codes = []
    for name, arr, s in (("w_q", w_q, s_w), ("x_q", x_q, s_x)):
        arr = np.asarray(arr, dtype=np.float32)
        k = np.rint(arr.astype(np.float64) / s)
        if np.abs(k).max(initial=0.0) > lim:
            raise ArgumentError(f"{name} has codes outside the {q}-bit grid")
        recon = (k * np.float64(s)).astype(np.float32)
        if not np.array_equal(recon, arr):
            raise ArgumentError(f"{name} is not on the grid with scale {s}")
        codes.append(k.astype(np.int64))
    kw, kx = codes
    int_prod = kw @ kx  # exact in int64 at these magnitudes
    rescaled = int_prod.astype(np.float64) * (np.float64(s_w) * np.float64(s_x))
    denom = max(float(np.abs(float_prod).max(initial=0.0)), 1e-30)
    return bool(np.abs(rescaled - float_prod).max(initial=0.0) / denom <= rel_tol)


def _format_scale(s):
    # shortest round-trip decimal keeps replay bit-exact
    return repr(float(s))


class QuantizationPlan:
    """Per-layer quantization states plus materialized quantized weights.

    Implements the forward-view protocol (weight / act / bias). States
    are installed by the search driver and frozen once their layer's
    search completes.
    """

    def __init__(self, model=None):
        self.states = {}
        self._weights = {}
        self._model = model

    # -- forward-view protocol ------------------------------------------------
    def weight(self, layer_i):
        return self._weights.get(layer_i)

    def act(self, layer_i):
        st = self.states.get(layer_i)
        return st.activation if st is not None else None

    def bias(self, layer_i):
        st = self.states.get(layer_i)
        if st is None or not st.bias_corrected or st.bias_delta is None:
            return None
        base = self._model.layer(layer_i).bias if self._model is not None else None
        if base is None:
            return st.bias_delta
        return base + st.bias_delta

    # -- construction helpers used by the driver ------------------------------
    def ensure(self, layer_i, q):
        if layer_i not in self.states:
            self.states[layer_i] = LayerQuantState(q=q)
        return self.states[layer_i]

    def install_weights(self, layer_i, weights_q):
        self._weights[layer_i] = weights_q

    def freeze_layer(self, layer_i):
        self.states[layer_i].freeze()

    # -- serialization ---------------------------------------------------------
    def to_records(self):
        records = []
        for layer_i in sorted(self.states):
            st = self.states[layer_i]
            rec = {"layer": layer_i, "q": st.q}
            if st.weight is not None:
                rec["weight"] = {
                    "gamma_c": st.weight.gamma_c,
                    "gamma_n": st.weight.params.gamma_n,
                    "gamma_s": st.weight.params.gamma_s,
                    "order": st.weight.params.order,
                    "scale": _format_scale(st.weight.scale),
                }
            if st.activation is not None:
                rec["activation"] = {
                    "gamma_c": st.activation.gamma_c,
                    "gamma_n": st.activation.params.gamma_n,
                    "gamma_s": st.activation.params.gamma_s,
                    "order": st.activation.params.order,
                    "scale": _format_scale(st.activation.scale),
                    "q": st.activation.q,
                }
            rec["bias_corrected"] = st.bias_corrected
            if st.bias_corrected and st.bias_delta is not None:
                rec["bias_delta_blob"] = f"bias_delta_{layer_i}.f32"
            records.append(rec)
        return records

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        records = self.to_records()
        for rec in records:
            blob = rec.get("bias_delta_blob")
            if blob:
                self.states[rec["layer"]].bias_delta.astype("<f4").tofile(os.path.join(out_dir, blob))
        with open(os.path.join(out_dir, "plan.json"), "w") as f:
            json.dump({"layers": records}, f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path, model):
        """Rebuild a plan from plan.json, rematerializing quantized weights.

        Weight tensors are recomputed from the stored gammas against the
        model's original blobs; the stored scale must agree with the
        recomputed one, which pins the replay to the original run.
        """
        plan_file = path if path.endswith(".json") else os.path.join(path, "plan.json")
        base_dir = os.path.dirname(plan_file)
        with open(plan_file) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise FormatError(f"plan is not valid JSON: {e}") from e
        if "layers" not in doc:
            raise FormatError("plan missing 'layers' array")
        plan = cls(model)
        for rec in doc["layers"]:
            try:
                layer_i = rec["layer"]
                st = plan.ensure(layer_i, int(rec["q"]))
                if "weight" in rec:
                    wrec = rec["weight"]
                    params = RoundingParams(
                        order=wrec["order"], gamma_n=wrec["gamma_n"], gamma_s=wrec["gamma_s"]
                    )
                    layer = model.layer(layer_i)
                    w_c, th, s = clip_by_gamma(layer.weights, wrec["gamma_c"], st.q)
                    stored = float(wrec["scale"])
                    if stored != s:
                        raise FormatError(
                            f"layer {layer_i}: stored weight scale {wrec['scale']} does not match "
                            f"recomputed {s!r}"
                        )
                    st.weight = WeightQuantState(wrec["gamma_c"], s, th, params)
                    plan.install_weights(layer_i, _round_with_params(w_c, s, params, st.q))
                if "activation" in rec:
                    arec = rec["activation"]
                    st.activation = ActQuantState(
                        gamma_c=arec["gamma_c"],
                        scale=float(arec["scale"]),
                        params=RoundingParams(
                            order=arec["order"], gamma_n=arec["gamma_n"], gamma_s=arec["gamma_s"]
                        ),
                        q=int(arec.get("q", rec["q"])),
                    )
                st.bias_corrected = bool(rec.get("bias_corrected", False))
                if st.bias_corrected and "bias_delta_blob" in rec:
                    blob_path = os.path.join(base_dir, rec["bias_delta_blob"])
                    if not os.path.exists(blob_path):
                        raise FormatError(f"layer {layer_i}: missing {rec['bias_delta_blob']}")
                    delta = np.fromfile(blob_path, dtype="<f4")
                    out_ch = model.layer(layer_i).weights.shape[0]
                    if delta.size != out_ch:
                        raise FormatError(
                            f"layer {layer_i}: bias delta has {delta.size} values, expected {out_ch}"
                        )
                    st.bias_delta = delta
            except KeyError as e:
                raise FormatError(f"plan record for layer {rec.get('layer', '?')} missing field {e}") from e
        return plan


def raise_if_frozen(state):
    if getattr(state, "frozen", False):
        raise ArgumentError("layer state is frozen")
