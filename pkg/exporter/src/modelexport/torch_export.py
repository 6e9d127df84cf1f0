"""Convert torch sequential checkpoints to the toolkit's model format.

A checkpoint is a torch.save'd dict:
  model         nn.Sequential of supported modules (eval-mode semantics)
  input_shape   per-sample input shape, e.g. [1, 12, 12] or [8]
  num_classes   logit count
  name          model name for the manifest
  sample_inputs optional float32 array, source of golden-logit samples

Supported modules: Conv2d (groups=1, dilation=1, square stride and
symmetric padding; rectangular kernels are fine since the kernel shape
travels with the weight blob), Linear, ReLU, MaxPool2d (no padding), Flatten,
AdaptiveAvgPool2d(1), BatchNorm1d/2d, Dropout (skipped), Identity
(skipped). BatchNorm can be folded into the preceding conv/fc or kept
as a standalone per-channel affine layer.

Golden logits are computed in torch with float64 layer arithmetic and a
float32 cast after every layer, which is the reference engine's
numeric contract.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .formats import ExportError, write_golden, write_model_dir


@dataclass
class ExportManifest:
    checkpoint: str
    out_dir: str
    fold_batchnorm: bool = False
    golden_count: int = 0
    name: str = None
    mapping: list = field(default_factory=list)  # (source module, exported kind) pairs


def _pair(value, what):
    if isinstance(value, (tuple, list)):
        a, b = value
        if a != b:
            raise ExportError(f"{what} must be square, got {value}")
        return int(a)
    return int(value)


def _flatten_modules(module):
    out = []
    for child in module.children():
        if isinstance(child, nn.Sequential):
            out.extend(_flatten_modules(child))
        else:
            out.append(child)
    return out


def _bn_scale_shift(bn):
    # eval-mode batchnorm is a per-channel affine in the running statistics
    var = bn.running_var.detach().double().numpy()
    mean = bn.running_mean.detach().double().numpy()
    gamma = bn.weight.detach().double().numpy() if bn.weight is not None else np.ones_like(var)
    beta = bn.bias.detach().double().numpy() if bn.bias is not None else np.zeros_like(var)
    scale = gamma / np.sqrt(var + bn.eps)
    shift = beta - mean * scale
    return scale, shift


def _fold_into(layer, scale, shift):
    w = layer["weights"].astype(np.float64)
    b = layer.get("bias")
    b = b.astype(np.float64) if b is not None else np.zeros(w.shape[0], dtype=np.float64)
    reshape = (-1,) + (1,) * (w.ndim - 1)
    layer["weights"] = (w * scale.reshape(reshape)).astype(np.float32)
    layer["bias"] = (b * scale + shift).astype(np.float32)


def convert_sequential(model, fold_batchnorm=False):
    """Emit toolkit layer dicts from an nn.Sequential; returns (layers, mapping)."""
    model = model.eval()
    layers = []
    mapping = []

    def emit(kind, mod, **fields):
        layers.append({"index": len(layers) + 1, "kind": kind, **fields})
        mapping.append((type(mod).__name__, kind))

    for mod in _flatten_modules(model):
        if isinstance(mod, nn.Conv2d):
            if mod.groups != 1 or _pair(mod.dilation, "dilation") != 1:
                raise ExportError(f"layer {len(layers) + 1} (Conv2d): groups/dilation unsupported")
            emit(
                "conv2d",
                mod,
                weights=mod.weight.detach().numpy().astype(np.float32),
                bias=mod.bias.detach().numpy().astype(np.float32) if mod.bias is not None else None,
                stride=_pair(mod.stride, "stride"),
                pad=_pair(mod.padding, "padding"),
            )
        elif isinstance(mod, nn.Linear):
            emit(
                "fc",
                mod,
                weights=mod.weight.detach().numpy().astype(np.float32),
                bias=mod.bias.detach().numpy().astype(np.float32) if mod.bias is not None else None,
            )
        elif isinstance(mod, nn.ReLU):
            emit("relu", mod)
        elif isinstance(mod, nn.MaxPool2d):
            if _pair(mod.padding, "padding") != 0 or _pair(mod.dilation, "dilation") != 1:
                raise ExportError(f"layer {len(layers) + 1} (MaxPool2d): padding/dilation unsupported")
            emit("maxpool", mod, kernel=_pair(mod.kernel_size, "kernel"), stride=_pair(mod.stride, "stride"))
        elif isinstance(mod, nn.AdaptiveAvgPool2d):
            if _pair(mod.output_size, "output size") != 1:
                raise ExportError(f"layer {len(layers) + 1} (AdaptiveAvgPool2d): only output size 1")
            emit("avgpool", mod)
        elif isinstance(mod, nn.Flatten):
            # the engine's global average pool already returns (N, C)
            if layers and layers[-1]["kind"] == "avgpool":
                mapping.append((type(mod).__name__, "(absorbed)"))
                continue
            emit("flatten", mod)
        elif isinstance(mod, (nn.BatchNorm1d, nn.BatchNorm2d)):
            scale, shift = _bn_scale_shift(mod)
            if fold_batchnorm:
                if not layers or layers[-1]["kind"] not in ("conv2d", "fc"):
                    raise ExportError(
                        f"layer {len(layers) + 1} ({type(mod).__name__}): nothing to fold into"
                    )
                _fold_into(layers[-1], scale, shift)
                mapping.append((type(mod).__name__, "(folded)"))
            else:
                emit(
                    "batchnorm",
                    mod,
                    weights=scale.astype(np.float32),
                    bias=shift.astype(np.float32),
                )
        elif isinstance(mod, (nn.Dropout, nn.Identity)):
            mapping.append((type(mod).__name__, "(skipped)"))
        else:
            raise ExportError(
                f"layer {len(layers) + 1} ({type(mod).__name__}) is not exportable; "
                f"supported: Conv2d, Linear, ReLU, MaxPool2d, AdaptiveAvgPool2d(1), "
                f"Flatten, BatchNorm1d/2d, Dropout, Identity"
            )
    if fold_batchnorm:
        assert all(l["kind"] != "batchnorm" for l in layers)
    return layers, mapping


def golden_forward(layers, x):
    """Reference forward over exported layer dicts: f64 math, f32 between layers."""
    cur = torch.as_tensor(np.ascontiguousarray(x, dtype=np.float32))
    for layer in layers:
        kind = layer["kind"]
        if kind == "conv2d":
            w = torch.from_numpy(layer["weights"]).double()
            b = torch.from_numpy(layer["bias"]).double() if layer.get("bias") is not None else None
            cur = F.conv2d(cur.double(), w, b, stride=layer["stride"], padding=layer["pad"]).float()
        elif kind == "fc":
            w = torch.from_numpy(layer["weights"]).double()
            b = torch.from_numpy(layer["bias"]).double() if layer.get("bias") is not None else None
            cur = F.linear(cur.double(), w, b).float()
        elif kind == "relu":
            cur = torch.relu(cur)
        elif kind == "maxpool":
            cur = F.max_pool2d(cur, layer["kernel"], layer["stride"])
        elif kind == "avgpool":
            cur = cur.double().mean(dim=(2, 3)).float()
        elif kind == "flatten":
            cur = cur.reshape(cur.shape[0], -1)
        elif kind == "batchnorm":
            scale = torch.from_numpy(layer["weights"]).double()
            shift = torch.from_numpy(layer["bias"]).double()
            view = (1, -1) + (1,) * (cur.ndim - 2)
            cur = (cur.double() * scale.view(view) + shift.view(view)).float()
        else:
            raise ExportError(f"golden forward cannot run kind {kind!r}")
    return cur.numpy()


def load_checkpoint(path):
    ck = torch.load(path, map_location="cpu", weights_only=False)
    for key in ("model", "input_shape", "num_classes", "name"):
        if key not in ck:
            raise ExportError(f"checkpoint missing field {key!r}")
    return ck


def export_model(manifest):
    """Write the model directory (and golden logits) described by manifest."""
    ck = load_checkpoint(manifest.checkpoint)
    name = manifest.name or ck["name"]
    layers, mapping = convert_sequential(ck["model"], manifest.fold_batchnorm)
    manifest.mapping = mapping
    write_model_dir(name, ck["num_classes"], ck["input_shape"], layers, manifest.out_dir)
    result = {"name": name, "layers": len(layers), "mapping": mapping}
    if manifest.golden_count > 0:
        samples = ck.get("sample_inputs")
        if samples is None:
            rng = np.random.default_rng(0)
            samples = rng.standard_normal(
                (manifest.golden_count, *ck["input_shape"]), dtype=np.float32
            )
        samples = np.asarray(samples, dtype=np.float32)[: manifest.golden_count]
        logits = golden_forward(layers, samples)
        write_golden(samples, logits, f"{manifest.out_dir}/golden")
        result["golden"] = int(samples.shape[0])
    return result
