import json
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ptqsearch import CalibrationSet, Layer, ModelGraph, load_calibration, load_model
from ptqsearch.model_graph import infer_shapes

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-bit-width searches, order of a minute")


FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


@pytest.fixture(scope="session")
def mlp_model():
    return load_model(fixture_path("mlp-2layer", "model"))


@pytest.fixture(scope="session")
def mlp_calib():
    return load_calibration(fixture_path("mlp-2layer", "calib"))


@pytest.fixture(scope="session")
def mlp_eval():
    return load_calibration(fixture_path("mlp-2layer", "eval"))


@pytest.fixture(scope="session")
def cnn_model():
    return load_model(fixture_path("cnn-digits", "model"))


@pytest.fixture(scope="session")
def cnn_calib():
    return load_calibration(fixture_path("cnn-digits", "calib"))


@pytest.fixture(scope="session")
def cnn_eval():
    return load_calibration(fixture_path("cnn-digits", "eval"))


def load_golden(name):
    base = fixture_path(name, "model", "golden")
    with open(os.path.join(base, "golden.json")) as f:
        meta = json.load(f)
    x = np.fromfile(os.path.join(base, "inputs.f32"), dtype="<f4").reshape(
        [meta["count"]] + list(meta["input_shape"])
    )
    logits = np.fromfile(os.path.join(base, "logits.f32"), dtype="<f4").reshape(
        [meta["count"]] + list(meta["logit_shape"])
    )
    return x, logits


def make_fc_model(weight_arrays, biases=None, relu_between=True, name="toy"):
    """Stack of fc layers (optionally relu-separated) as a validated graph."""
    arrays = [np.asarray(w, dtype=np.float32) for w in weight_arrays]
    biases = biases if biases is not None else [None] * len(arrays)
    layers = []
    for pos, (w, b) in enumerate(zip(arrays, biases)):
        layers.append(
            Layer(
                index=len(layers) + 1,
                kind="fc",
                weights=w,
                bias=None if b is None else np.asarray(b, dtype=np.float32),
            )
        )
        if relu_between and pos < len(arrays) - 1:
            layers.append(Layer(index=len(layers) + 1, kind="relu"))
    model = ModelGraph(
        name=name,
        num_classes=int(arrays[-1].shape[0]),
        input_shape=(int(arrays[0].shape[1]),),
        layers=layers,
    )
    infer_shapes(model)
    return model


def make_calib(x, y, num_classes):
    return CalibrationSet(
        inputs=np.asarray(x, dtype=np.float32),
        labels=np.asarray(y, dtype=np.int64),
        num_classes=num_classes,
    )
