"""Module conversion, batchnorm folding, and golden-logit agreement.

The round-trip tests import the quantization toolkit to run its engine
against the exported directories; that is the agreement being verified,
not a code dependency of the exporter itself.
"""

import json
import os

import numpy as np
import pytest
import torch
from torch import nn

from modelexport import (
    ExportError,
    ExportManifest,
    convert_sequential,
    export_model,
    golden_forward,
    load_checkpoint,
)

from conftest import repo_fixture, small_cnn


def rel_err(a, b):
    denom = max(float(np.abs(b).max()), 1e-30)
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).max()) / denom


# -- conversion ---------------------------------------------------------------


def test_convert_maps_and_skips_modules():
    layers, mapping = convert_sequential(small_cnn())
    kinds = [l["kind"] for l in layers]
    assert kinds == [
        "conv2d", "batchnorm", "relu", "maxpool", "conv2d", "relu", "avgpool", "fc",
    ]
    assert ("Dropout", "(skipped)") in mapping
    assert ("Flatten", "(absorbed)") in mapping
    assert [i == l["index"] for i, l in enumerate(layers, start=1)]


def test_convert_folds_batchnorm():
    layers, mapping = convert_sequential(small_cnn(), fold_batchnorm=True)
    assert all(l["kind"] != "batchnorm" for l in layers)
    assert ("BatchNorm2d", "(folded)") in mapping


def test_folding_preserves_function():
    model = small_cnn(seed=4)
    plain, _ = convert_sequential(model)
    folded, _ = convert_sequential(model, fold_batchnorm=True)
    x = np.random.default_rng(5).standard_normal((32, 1, 8, 8)).astype(np.float32)
    assert rel_err(golden_forward(folded, x), golden_forward(plain, x)) <= 1e-5


def test_folding_matches_torch_eval_forward():
    model = small_cnn(seed=9)
    folded, _ = convert_sequential(model, fold_batchnorm=True)
    x = np.random.default_rng(6).standard_normal((16, 1, 8, 8)).astype(np.float32)
    with torch.no_grad():
        want = model(torch.from_numpy(x)).numpy()
    assert rel_err(golden_forward(folded, x), want) <= 1e-5


def test_fold_without_preceding_weighted_layer():
    bn = nn.BatchNorm2d(4)
    with pytest.raises(ExportError, match="nothing to fold into"):
        convert_sequential(nn.Sequential(bn, nn.ReLU()), fold_batchnorm=True)


def test_standalone_batchnorm_is_affine():
    torch.manual_seed(2)
    bn = nn.BatchNorm1d(6)
    bn.train()
    with torch.no_grad():
        for _ in range(3):
            bn(torch.randn(32, 6))
    bn.eval()
    layers, _ = convert_sequential(nn.Sequential(bn))
    x = np.random.default_rng(7).standard_normal((10, 6)).astype(np.float32)
    with torch.no_grad():
        want = bn(torch.from_numpy(x)).numpy()
    assert rel_err(golden_forward(layers, x), want) <= 1e-5


def test_unsupported_module_names_the_layer():
    model = nn.Sequential(nn.Linear(4, 4), nn.Sigmoid())
    with pytest.raises(ExportError, match=r"layer 2 \(Sigmoid\)"):
        convert_sequential(model)


def test_unsupported_conv_options():
    grouped = nn.Sequential(nn.Conv2d(4, 4, 3, groups=2))
    with pytest.raises(ExportError, match="groups/dilation"):
        convert_sequential(grouped)
    rect_stride = nn.Sequential(nn.Conv2d(1, 2, 3, stride=(1, 2)))
    with pytest.raises(ExportError, match="square"):
        convert_sequential(rect_stride)
    padded_pool = nn.Sequential(nn.MaxPool2d(2, padding=1))
    with pytest.raises(ExportError, match="padding/dilation"):
        convert_sequential(padded_pool)
    wide_avg = nn.Sequential(nn.AdaptiveAvgPool2d(2))
    with pytest.raises(ExportError, match="output size 1"):
        convert_sequential(wide_avg)


def test_rectangular_kernel_exports_and_runs():
    # kernel geometry travels with the weight blob; only stride/padding
    # must be square
    torch.manual_seed(1)
    model = nn.Sequential(nn.Conv2d(1, 2, (3, 5))).eval()
    layers, _ = convert_sequential(model)
    assert layers[0]["weights"].shape == (2, 1, 3, 5)
    x = np.random.default_rng(8).standard_normal((2, 1, 8, 9)).astype(np.float32)
    with torch.no_grad():
        want = model(torch.from_numpy(x)).numpy()
    assert rel_err(golden_forward(layers, x), want) <= 1e-5


def test_golden_forward_rejects_unknown_kind():
    with pytest.raises(ExportError, match="cannot run kind"):
        golden_forward([{"index": 1, "kind": "gelu"}], np.zeros((1, 4), dtype=np.float32))


def test_load_checkpoint_missing_field(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"model": nn.Sequential(nn.Linear(2, 2))}, path)
    with pytest.raises(ExportError, match="missing field 'input_shape'"):
        load_checkpoint(str(path))


# -- export round trips -------------------------------------------------------


def test_engine_matches_golden_logits(exported_dir):
    # [secondary release gate] engine vs source-framework logits
    from ptqsearch.model_graph import forward, load_model

    model = load_model(exported_dir)
    meta_path = os.path.join(exported_dir, "golden", "golden.json")
    with open(meta_path) as f:
        meta = json.load(f)
    assert meta["count"] == 100
    x = np.fromfile(
        os.path.join(exported_dir, "golden", "inputs.f32"), dtype="<f4"
    ).reshape([meta["count"]] + meta["input_shape"])
    want = np.fromfile(
        os.path.join(exported_dir, "golden", "logits.f32"), dtype="<f4"
    ).reshape([meta["count"]] + meta["logit_shape"])
    got, _ = forward(model, x)
    err = rel_err(got, want)
    print(f"[PASS] exporter-roundtrip: engine vs golden rel err {err:.2e} on 100 samples (tol 1e-4)")
    assert err <= 1e-4


def test_committed_fixture_goldens_still_match():
    from ptqsearch.model_graph import forward, load_model

    for name in ("mlp-2layer", "cnn-digits"):
        model_dir = repo_fixture(name, "model")
        model = load_model(model_dir)
        with open(os.path.join(model_dir, "golden", "golden.json")) as f:
            meta = json.load(f)
        x = np.fromfile(
            os.path.join(model_dir, "golden", "inputs.f32"), dtype="<f4"
        ).reshape([meta["count"]] + meta["input_shape"])
        want = np.fromfile(
            os.path.join(model_dir, "golden", "logits.f32"), dtype="<f4"
        ).reshape([meta["count"]] + meta["logit_shape"])
        got, _ = forward(model, x)
        assert rel_err(got, want) <= 1e-4, name


def test_reexport_is_byte_identical(checkpoint_path, tmp_path):
    dirs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        export_model(
            ExportManifest(checkpoint=checkpoint_path, out_dir=out, golden_count=10)
        )
        dirs.append(out)
    a, b = dirs
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    for name in names:
        pa, pb = os.path.join(a, name), os.path.join(b, name)
        if os.path.isdir(pa):
            continue
        with open(pa, "rb") as fa, open(pb, "rb") as fb:
            assert fa.read() == fb.read(), name
    for name in sorted(os.listdir(os.path.join(a, "golden"))):
        with open(os.path.join(a, "golden", name), "rb") as fa:
            with open(os.path.join(b, "golden", name), "rb") as fb:
                assert fa.read() == fb.read(), name


def test_export_result_summary(checkpoint_path, tmp_path):
    result = export_model(
        ExportManifest(
            checkpoint=checkpoint_path,
            out_dir=str(tmp_path / "m"),
            golden_count=7,
            name="renamed",
        )
    )
    assert result["name"] == "renamed"
    assert result["layers"] == 8
    assert result["golden"] == 7


def test_export_without_sample_inputs_draws_seeded_noise(tmp_path):
    torch.manual_seed(0)
    ck = {
        "model": nn.Sequential(nn.Linear(4, 2)),
        "input_shape": [4],
        "num_classes": 2,
        "name": "noise",
    }
    path = tmp_path / "ck.pt"
    torch.save(ck, path)
    outs = []
    for name in ("x", "y"):
        out = str(tmp_path / name)
        export_model(ExportManifest(checkpoint=str(path), out_dir=out, golden_count=5))
        outs.append(
            np.fromfile(os.path.join(out, "golden", "inputs.f32"), dtype="<f4")
        )
    assert np.array_equal(outs[0], outs[1])
    assert outs[0].shape == (20,)
