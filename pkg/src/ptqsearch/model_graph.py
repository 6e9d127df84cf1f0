"""Model directory format, calibration sets, and the forward engine.

A model directory holds manifest.json plus raw little-endian float32
blobs (w<i>.f32 / b<i>.f32, row-major, no header). Layers form a chain
indexed from 1; `add` layers take a second input from an earlier layer
via skip_from. Graphs are immutable after load: quantization never
touches the stored arrays, it goes through a plan view at forward time.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor_ops as T
from .errors import ArgumentError, DimensionError, FormatError

LAYER_KINDS = ("conv2d", "fc", "relu", "add", "maxpool", "avgpool", "flatten", "batchnorm")
WEIGHTED_KINDS = ("conv2d", "fc")


@dataclass
class Layer:
    index: int
    kind: str
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    pad: int = 0
    kernel: int = 0
    skip_from: Optional[int] = None


@dataclass
class ModelGraph:
    name: str
    num_classes: int
    input_shape: tuple
    layers: list = field(default_factory=list)

    def layer(self, index):
        if not 1 <= index <= len(self.layers):
            raise ArgumentError(f"layer index {index} out of range 1..{len(self.layers)}")
        return self.layers[index - 1]

    def weighted_layers(self):
        return [l.index for l in self.layers if l.kind in WEIGHTED_KINDS]


def _load_blob(path, shape, layer_index):
    if not os.path.exists(path):
        raise FormatError(f"layer {layer_index}: missing blob {os.path.basename(path)}")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise FormatError(
            f"layer {layer_index}: blob {os.path.basename(path)} holds {data.size} floats, "
            f"expected {expected} for shape {list(shape)}"
        )
    if not np.all(np.isfinite(data)):
        raise FormatError(f"layer {layer_index}: blob {os.path.basename(path)} contains non-finite values")
    return data.reshape(shape)


def infer_shapes(model):
    """Propagate activation shapes through the chain, validating geometry.

    Returns the shape after each layer (dict index -> tuple). Raises
    FormatError naming the offending layer when something is inconsistent.
    """
    shapes = {0: tuple(model.input_shape)}
    cur = shapes[0]
    for layer in model.layers:
        i, kind = layer.index, layer.kind
        try:
            if kind == "conv2d":
                if len(cur) != 3:
                    raise DimensionError(f"conv2d input must be 3-D (C,H,W); have {cur}")
                f, c, kh, kw = layer.weights.shape
                if c != cur[0]:
                    raise DimensionError(f"conv2d expects {c} channels, input has {cur[0]}")
                h = T._out_extent(cur[1], kh, layer.stride, layer.pad, "conv2d")
                w = T._out_extent(cur[2], kw, layer.stride, layer.pad, "conv2d")
                cur = (f, h, w)
            elif kind == "fc":
                if len(cur) != 1:
                    raise DimensionError(f"fc input must be flat; have {cur}")
                out_f, in_f = layer.weights.shape
                if in_f != cur[0]:
                    raise DimensionError(f"fc expects {in_f} features, input has {cur[0]}")
                cur = (out_f,)
            elif kind == "relu":
                pass
            elif kind == "add":
                src = shapes.get(layer.skip_from)
                if src is None or src != cur:
                    raise DimensionError(f"add joins {src} from layer {layer.skip_from} with {cur}")
            elif kind == "maxpool":
                if len(cur) != 3:
                    raise DimensionError(f"maxpool input must be 3-D; have {cur}")
                h = T._out_extent(cur[1], layer.kernel, layer.stride, 0, "maxpool2d")
                w = T._out_extent(cur[2], layer.kernel, layer.stride, 0, "maxpool2d")
                cur = (cur[0], h, w)
            elif kind == "avgpool":
                if len(cur) != 3:
                    raise DimensionError(f"avgpool input must be 3-D; have {cur}")
                cur = (cur[0],)
            elif kind == "flatten":
                cur = (int(np.prod(cur)),)
            elif kind == "batchnorm":
                if layer.weights.shape != (cur[0],):
                    raise DimensionError(f"batchnorm scale {layer.weights.shape} vs channels {cur[0]}")
            else:
                raise DimensionError(f"unknown kind {kind}")
        except DimensionError as e:
            raise FormatError(f"layer {i}: {e}") from e
        shapes[i] = cur
    if cur != (model.num_classes,):
        raise FormatError(f"model output shape {cur} does not match num_classes {model.num_classes}")
    return shapes


def load_model(path):
    """Read a model directory into an immutable ModelGraph."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"no manifest.json under {path}")
    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest.json is not valid JSON: {e}") from e
    for key in ("name", "num_classes", "input_shape", "layers"):
        if key not in manifest:
            raise FormatError(f"manifest.json missing field {key!r}")
    layers = []
    for pos, entry in enumerate(manifest["layers"], start=1):
        idx = entry.get("index")
        if idx != pos:
            raise FormatError(f"layer {pos}: index field is {idx}, expected contiguous from 1")
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise FormatError(f"layer {idx}: unknown kind {kind!r}")
        layer = Layer(index=idx, kind=kind)
        if kind in ("conv2d", "fc", "batchnorm"):
            if "weight_shape" not in entry or "weight_blob" not in entry:
                raise FormatError(f"layer {idx}: {kind} requires weight_shape and weight_blob")
            layer.weights = _load_blob(os.path.join(path, entry["weight_blob"]), entry["weight_shape"], idx)
            if entry.get("bias_blob") is not None:
                layer.bias = _load_blob(os.path.join(path, entry["bias_blob"]), entry["bias_shape"], idx)
            if kind == "batchnorm" and layer.bias is None:
                raise FormatError(f"layer {idx}: batchnorm requires a shift blob")
        if kind == "conv2d":
            layer.stride = int(entry.get("stride", 1))
            layer.pad = int(entry.get("pad", 0))
        if kind == "maxpool":
            layer.kernel = int(entry["kernel"])
            layer.stride = int(entry["stride"])
        if kind == "add":
            skip = entry.get("skip_from")
            if not isinstance(skip, int) or not 1 <= skip < idx:
                raise FormatError(f"layer {idx}: skip_from must name an earlier layer, got {skip!r}")
            layer.skip_from = skip
        layers.append(layer)
    model = ModelGraph(
        name=manifest["name"],
        num_classes=int(manifest["num_classes"]),
        input_shape=tuple(manifest["input_shape"]),
        layers=layers,
    )
    infer_shapes(model)
    return model


def save_model(model, path):
    """Write a ModelGraph back out as a model directory (bit-exact blobs)."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for layer in model.layers:
        entry = {"index": layer.index, "kind": layer.kind}
        if layer.weights is not None:
            wname = f"w{layer.index}.f32"
            layer.weights.astype("<f4").tofile(os.path.join(path, wname))
            entry["weight_shape"] = list(layer.weights.shape)
            entry["weight_blob"] = wname
        if layer.bias is not None:
            bname = f"b{layer.index}.f32"
            layer.bias.astype("<f4").tofile(os.path.join(path, bname))
            entry["bias_shape"] = list(layer.bias.shape)
            entry["bias_blob"] = bname
        if layer.kind == "conv2d":
            entry["stride"] = layer.stride
            entry["pad"] = layer.pad
        if layer.kind == "maxpool":
            entry["kernel"] = layer.kernel
            entry["stride"] = layer.stride
        if layer.kind == "add":
            entry["skip_from"] = layer.skip_from
        entries.append(entry)
    manifest = {
        "name": model.name,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "layers": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


@dataclass
class CalibrationSet:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    @property
    def count(self):
        return self.inputs.shape[0]

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def batches(self, batch_size):
        if batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
        out = []
        for start in range(0, self.count, batch_size):
            out.append((self.inputs[start : start + batch_size], self.labels[start : start + batch_size]))
        return out


def load_calibration(path):
    meta_path = os.path.join(path, "calib.json")
    if not os.path.exists(meta_path):
        raise FormatError(f"no calib.json under {path}")
    with open(meta_path) as f:
        meta = json.load(f)
    count = int(meta["count"])
    shape = tuple(meta["input_shape"])
    inputs = np.fromfile(os.path.join(path, "inputs.f32"), dtype="<f4")
    expected = count * int(np.prod(shape))
    if inputs.size != expected:
        raise FormatError(f"inputs.f32 holds {inputs.size} floats, expected {expected}")
    labels = np.fromfile(os.path.join(path, "labels.u32"), dtype="<u4")
    if labels.size != count:
        raise FormatError(f"labels.u32 holds {labels.size} entries, expected {count}")
    if not np.all(np.isfinite(inputs)):
        raise FormatError("inputs.f32 contains non-finite values")
    return CalibrationSet(
        inputs=inputs.reshape((count,) + shape),
        labels=labels.astype(np.int64),
        num_classes=int(meta["num_classes"]),
    )


def save_calibration(calib, path):
    os.makedirs(path, exist_ok=True)
    calib.inputs.astype("<f4").tofile(os.path.join(path, "inputs.f32"))
    calib.labels.astype("<u4").tofile(os.path.join(path, "labels.u32"))
    with open(os.path.join(path, "calib.json"), "w") as f:
        json.dump(
            {
                "count": int(calib.count),
                "input_shape": list(calib.input_shape),
                "num_classes": int(calib.num_classes),
            },
            f,
            indent=1,
        )
        f.write("\n")


def subset_per_class(calib, per_class, seed=0):
    """First per_class samples of each class after a seeded shuffle."""
    if per_class < 1:
        raise ArgumentError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(calib.count)
    picked = []
    counts = {}
    for idx in order:
        lab = int(calib.labels[idx])
        if counts.get(lab, 0) < per_class:
            counts[lab] = counts.get(lab, 0) + 1
            picked.append(idx)
    picked.sort()
    sel = np.array(picked, dtype=np.int64)
    return CalibrationSet(calib.inputs[sel], calib.labels[sel], calib.num_classes)


def _skip_sources(model):
    return {l.skip_from for l in model.layers if l.kind == "add"}


def forward(model, x, quant=None, start=1, prefix=None, capture=(), stop=None):
    """Run layers start..stop (default: all) and return (logits, captured).

    quant, when given, must expose weight(i) -> array or None,
    act(i) -> activation state or None, and bias(i) -> array or None;
    plans and search candidates both satisfy this. Activation states
    fake-quantize the input of their layer. With start > 1, prefix must
    hold the outputs of layer start-1 and of any skip sources < start.

    captured outputs are the raw layer outputs (before any consumer's
    activation quantization).
    """
    from .quant import quantize_activation  # local import to avoid a cycle

    capture = set(capture)
    captured = {}
    skip_needs = _skip_sources(model)
    if start == 1:
        prev = np.asarray(x, dtype=np.float32)
        live = {}
    else:
        if prefix is None or (start - 1) not in prefix:
            raise ArgumentError(f"forward from layer {start} requires prefix output of layer {start - 1}")
        prev = prefix[start - 1]
        live = {k: v for k, v in prefix.items() if k in skip_needs}

    last = len(model.layers) if stop is None else stop
    for layer in model.layers[start - 1 : last]:
        i = layer.index
        x_in = prev
        if quant is not None and layer.kind in WEIGHTED_KINDS:
            act_state = quant.act(i)
            if act_state is not None:
                x_in = quantize_activation(x_in, act_state.scale, act_state.params, act_state.q)
        if layer.kind == "conv2d":
            w = _resolved_weights(layer, quant)
            b = _resolved_bias(layer, quant)
            prev = T.conv2d(x_in, w, b, stride=layer.stride, pad=layer.pad)
        elif layer.kind == "fc":
            w = _resolved_weights(layer, quant)
            b = _resolved_bias(layer, quant)
            prev = T.fc(x_in, w, b)
        elif layer.kind == "relu":
            prev = T.relu(x_in)
        elif layer.kind == "add":
            if layer.skip_from not in live:
                raise ArgumentError(f"layer {i}: skip source {layer.skip_from} not available")
            prev = T.add(x_in, live[layer.skip_from])
        elif layer.kind == "maxpool":
            prev = T.maxpool2d(x_in, layer.kernel, layer.stride)
        elif layer.kind == "avgpool":
            prev = T.global_avgpool(x_in)
        elif layer.kind == "flatten":
            prev = T.flatten(x_in)
        elif layer.kind == "batchnorm":
            prev = T.batchnorm(x_in, layer.weights, layer.bias)
        if i in skip_needs:
            live[i] = prev
        if i in capture:
            captured[i] = prev
    return prev, captured


def _resolved_weights(layer, quant):
    if quant is not None:
        w = quant.weight(layer.index)
        if w is not None:
            return w
    return layer.weights


def _resolved_bias(layer, quant):
    if quant is not None:
        b = quant.bias(layer.index)
        if b is not None:
            return b
    return layer.bias
