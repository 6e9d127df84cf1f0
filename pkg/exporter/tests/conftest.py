import os

import numpy as np
import pytest
import torch
from torch import nn

from modelexport import ExportManifest, export_model

REPO_FIXTURES = os.path.join(os.path.dirname(__file__), "..", "..", "fixtures")


def repo_fixture(*parts):
    return os.path.join(REPO_FIXTURES, *parts)


def small_cnn(seed=0):
    """Random conv net exercising every supported module kind."""
    torch.manual_seed(seed)
    model = nn.Sequential(
        nn.Conv2d(1, 4, 3, padding=1),
        nn.BatchNorm2d(4),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(4, 8, 3, padding=1),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Dropout(0.5),
        nn.Linear(8, 3),
    )
    # populate batchnorm running stats with a few train-mode batches
    model.train()
    with torch.no_grad():
        for _ in range(4):
            model(torch.randn(16, 1, 8, 8))
    return model.eval()


@pytest.fixture(scope="session")
def checkpoint_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "checkpoint.pt"
    rng = np.random.default_rng(11)
    torch.save(
        {
            "model": small_cnn(),
            "input_shape": [1, 8, 8],
            "num_classes": 3,
            "name": "toy-cnn",
            "sample_inputs": rng.standard_normal((100, 1, 8, 8)).astype(np.float32),
        },
        path,
    )
    return str(path)


@pytest.fixture(scope="session")
def exported_dir(checkpoint_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("exp") / "model")
    export_model(
        ExportManifest(checkpoint=checkpoint_path, out_dir=out, golden_count=100)
    )
    return out
