"""Desk-scale trained fixtures: a 2-layer MLP and a small digit CNN.

Both tasks are synthetic so the repository carries no external data.
make_fixture trains the model, rejects it if accuracy lands under the
fixture's floor, and writes checkpoint + model dir (with golden logits)
+ calibration and eval splits + a README recording seed and accuracy.
"""

import os

import numpy as np
import torch
from torch import nn

from .formats import ExportError, write_calibration_dir
from .torch_export import ExportManifest, export_model

FIXTURE_KINDS = ("mlp_synthetic", "cnn_mnist_subset")
ACCURACY_FLOORS = {"mlp_synthetic": 0.95, "cnn_mnist_subset": 0.90}

# 5x7 bitmap font, one string row per scanline
DIGIT_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

CANVAS = 12
GLYPH_H, GLYPH_W = 7, 5


def _glyph_array(digit):
    rows = DIGIT_GLYPHS[digit]
    return np.array([[c == "1" for c in row] for row in rows], dtype=np.float32)


def render_digits(labels, rng, noise_std=0.2, drop_p=0.1):
    """Noisy shifted glyph images, one channel, CANVAS x CANVAS."""
    n = len(labels)
    out = np.zeros((n, 1, CANVAS, CANVAS), dtype=np.float32)
    for i, lab in enumerate(labels):
        glyph = _glyph_array(int(lab)) * rng.uniform(0.6, 1.0)
        glyph = glyph * (rng.random(glyph.shape) > drop_p)
        y = 2 + rng.integers(-2, 3)
        x = 3 + rng.integers(-2, 3)
        out[i, 0, y : y + GLYPH_H, x : x + GLYPH_W] = glyph
    out += rng.normal(0.0, noise_std, out.shape).astype(np.float32)
    return out


def _balanced_labels(per_class, num_classes, rng):
    labels = np.repeat(np.arange(num_classes, dtype=np.uint32), per_class)
    return labels[rng.permutation(labels.size)]


def make_blob_data(per_class, centers, rng):
    labels = _balanced_labels(per_class, centers.shape[0], rng)
    x = centers[labels] + rng.normal(0.0, 1.0, (labels.size, centers.shape[1]))
    return x.astype(np.float32), labels


def _train(model, x, y, epochs, lr, batch_size, seed):
    torch.manual_seed(seed)
    x_t = torch.from_numpy(x)
    y_t = torch.from_numpy(y.astype(np.int64))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    n = x_t.shape[0]
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad()
            loss = loss_fn(model(x_t[idx]), y_t[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


def _accuracy(model, x, y):
    model.eval()
    with torch.no_grad():
        pred = model(torch.from_numpy(x)).argmax(dim=1).numpy()
    return float((pred == y.astype(np.int64)).mean())


def _mlp_fixture(seed):
    rng = np.random.default_rng(seed)
    centers = (rng.normal(0.0, 1.0, (4, 8)) * 1.6).astype(np.float64)
    train_x, train_y = make_blob_data(500, centers, rng)
    calib_x, calib_y = make_blob_data(64, centers, rng)
    eval_x, eval_y = make_blob_data(250, centers, rng)
    model = nn.Sequential(nn.Linear(8, 16), nn.ReLU(), nn.Linear(16, 4))
    _train(model, train_x, train_y, epochs=300, lr=0.01, batch_size=2000, seed=seed)
    return {
        "name": "mlp-2layer",
        "model": model,
        "input_shape": [8],
        "num_classes": 4,
        "fold_batchnorm": False,
        "splits": {
            "train": (train_x, train_y),
            "calib": (calib_x, calib_y),
            "eval": (eval_x, eval_y),
        },
        "task": "4 Gaussian blobs in 8 dimensions (unit noise, centers ~ 1.6 N(0,1))",
        "arch": "fc 8->16, relu, fc 16->4",
    }


def _cnn_fixture(seed):
    rng = np.random.default_rng(seed)
    train_y = _balanced_labels(400, 10, rng)
    calib_y = _balanced_labels(64, 10, rng)
    eval_y = _balanced_labels(100, 10, rng)
    train_x = render_digits(train_y, rng)
    calib_x = render_digits(calib_y, rng)
    eval_x = render_digits(eval_y, rng)
    model = nn.Sequential(
        nn.Conv2d(1, 8, 3, padding=1),
        nn.BatchNorm2d(8),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1),
        nn.BatchNorm2d(16),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 3, padding=1),
        nn.BatchNorm2d(32),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(32, 10),
    )
    _train(model, train_x, train_y, epochs=25, lr=0.003, batch_size=128, seed=seed)
    return {
        "name": "cnn-digits",
        "model": model,
        "input_shape": [1, CANVAS, CANVAS],
        "num_classes": 10,
        "fold_batchnorm": True,
        "splits": {
            "train": (train_x, train_y),
            "calib": (calib_x, calib_y),
            "eval": (eval_x, eval_y),
        },
        "task": "10 digit glyphs (5x7 font) on a 12x12 canvas with shift, pixel dropout, "
                "amplitude jitter, and Gaussian noise (sigma 0.2)",
        "arch": "3x [conv 3x3 + batchnorm + relu (+maxpool)] -> global avgpool -> fc, "
                "batchnorm folded at export",
    }


def make_fixture(kind, seed, out_dir, golden_count=100):
    """Train, validate against the accuracy floor, and write a fixture tree.

    Layout: checkpoint.pt, model/ (manifest + blobs + golden/), calib/,
    eval/, README.md. Returns a dict with the recorded accuracies.
    """
    if kind not in FIXTURE_KINDS:
        raise ExportError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")
    build = _mlp_fixture if kind == "mlp_synthetic" else _cnn_fixture
    spec = build(seed)
    train_x, train_y = spec["splits"]["train"]
    calib_x, calib_y = spec["splits"]["calib"]
    eval_x, eval_y = spec["splits"]["eval"]

    train_acc = _accuracy(spec["model"], train_x, train_y)
    eval_acc = _accuracy(spec["model"], eval_x, eval_y)
    floor = ACCURACY_FLOORS[kind]
    if eval_acc < floor or train_acc < floor:
        raise ExportError(
            f"fixture rejected: accuracy floor {floor:.2f} not met "
            f"(train {train_acc:.4f}, eval {eval_acc:.4f}); try another seed"
        )

    os.makedirs(out_dir, exist_ok=True)
    checkpoint = {
        "model": spec["model"],
        "input_shape": spec["input_shape"],
        "num_classes": spec["num_classes"],
        "name": spec["name"],
        "sample_inputs": eval_x[:golden_count],
    }
    ck_path = os.path.join(out_dir, "checkpoint.pt")
    torch.save(checkpoint, ck_path)
    manifest = ExportManifest(
        checkpoint=ck_path,
        out_dir=os.path.join(out_dir, "model"),
        fold_batchnorm=spec["fold_batchnorm"],
        golden_count=golden_count,
    )
    export_model(manifest)
    write_calibration_dir(calib_x, calib_y, spec["num_classes"], os.path.join(out_dir, "calib"))
    write_calibration_dir(eval_x, eval_y, spec["num_classes"], os.path.join(out_dir, "eval"))

    readme = "\n".join(
        [
            f"# {spec['name']} fixture",
            "",
            f"Task: {spec['task']}.",
            f"Architecture: {spec['arch']}.",
            "",
            f"Generated with seed {seed}; golden logits cover the first "
            f"{min(golden_count, eval_x.shape[0])} eval samples.",
            "",
            f"- train: {train_x.shape[0]} samples, accuracy {train_acc:.4f}",
            f"- calib: {calib_x.shape[0]} samples",
            f"- eval: {eval_x.shape[0]} samples, accuracy {eval_acc:.4f}",
            f"- accuracy floor: {floor:.2f}",
            "",
            "Regenerate (overwrites this tree):",
            "",
            f"    modelexport fixture --kind {kind} --seed {seed} --out <dir>",
            "",
        ]
    )
    with open(os.path.join(out_dir, "README.md"), "w") as f:
        f.write(readme)
    return {
        "name": spec["name"],
        "kind": kind,
        "seed": seed,
        "train_accuracy": train_acc,
        "eval_accuracy": eval_acc,
        "out_dir": out_dir,
    }
