"""Writers for the toolkit's on-disk model and calibration formats.

Model directory: manifest.json plus one little-endian f32 blob per
weight/bias tensor (w<i>.f32 / b<i>.f32, row-major, headerless).
Calibration directory: calib.json plus inputs.f32 and labels.u32.
These mirror the quantization toolkit's documented interface; nothing
here imports it.
"""

import json
import os

import numpy as np

SUPPORTED_KINDS = ("conv2d", "fc", "relu", "add", "maxpool", "avgpool", "flatten", "batchnorm")


class ExportError(Exception):
    pass


def write_model_dir(name, num_classes, input_shape, layers, out_dir):
    """layers: list of dicts with index, kind and kind-specific fields.

    Weight/bias arrays are pulled from the 'weights'/'bias' keys, written
    as blobs, and replaced by shape+filename references in the manifest.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for layer in layers:
        index = layer["index"]
        kind = layer["kind"]
        if kind not in SUPPORTED_KINDS:
            raise ExportError(f"layer {index}: unsupported kind {kind!r}")
        entry = {"index": index, "kind": kind}
        w = layer.get("weights")
        if w is not None:
            w = np.ascontiguousarray(w, dtype="<f4")
            wname = f"w{index}.f32"
            w.tofile(os.path.join(out_dir, wname))
            entry["weight_shape"] = list(w.shape)
            entry["weight_blob"] = wname
        b = layer.get("bias")
        if b is not None:
            b = np.ascontiguousarray(b, dtype="<f4")
            bname = f"b{index}.f32"
            b.tofile(os.path.join(out_dir, bname))
            entry["bias_shape"] = list(b.shape)
            entry["bias_blob"] = bname
        if kind == "conv2d":
            entry["stride"] = int(layer.get("stride", 1))
            entry["pad"] = int(layer.get("pad", 0))
        if kind == "maxpool":
            entry["kernel"] = int(layer["kernel"])
            entry["stride"] = int(layer["stride"])
        if kind == "add":
            entry["skip_from"] = int(layer["skip_from"])
        entries.append(entry)
    manifest = {
        "name": name,
        "num_classes": int(num_classes),
        "input_shape": list(int(d) for d in input_shape),
        "layers": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return out_dir


def write_calibration_dir(inputs, labels, num_classes, out_dir):
    inputs = np.ascontiguousarray(inputs, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    if inputs.shape[0] != labels.shape[0]:
        raise ExportError(f"{inputs.shape[0]} inputs vs {labels.shape[0]} labels")
    os.makedirs(out_dir, exist_ok=True)
    inputs.tofile(os.path.join(out_dir, "inputs.f32"))
    labels.tofile(os.path.join(out_dir, "labels.u32"))
    meta = {
        "count": int(inputs.shape[0]),
        "input_shape": list(int(d) for d in inputs.shape[1:]),
        "num_classes": int(num_classes),
    }
    with open(os.path.join(out_dir, "calib.json"), "w") as f:
        json.dump(meta, f, indent=1)
        f.write("\n")
    return out_dir


def write_golden(inputs, logits, out_dir):
    """Reference inputs and their full-precision logits, for engine checks."""
    os.makedirs(out_dir, exist_ok=True)
    inputs = np.ascontiguousarray(inputs, dtype="<f4")
    logits = np.ascontiguousarray(logits, dtype="<f4")
    inputs.tofile(os.path.join(out_dir, "inputs.f32"))
    logits.tofile(os.path.join(out_dir, "logits.f32"))
    meta = {
        "count": int(inputs.shape[0]),
        "input_shape": list(int(d) for d in inputs.shape[1:]),
        "logit_shape": list(int(d) for d in logits.shape[1:]),
    }
    with open(os.path.join(out_dir, "golden.json"), "w") as f:
        json.dump(meta, f, indent=1)
        f.write("\n")
    return out_dir
