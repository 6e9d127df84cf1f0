#!/usr/bin/env python3
"""Measure what the bias-correction phase contributes per bit width.

Runs the searched pipeline twice (with and without the bias phase) and
reports eval accuracy plus which layers actually kept a correction;
the search only applies one when it strictly improves the objective.

    python3 scripts/bias_correction_study.py --bits 3 4
"""

import argparse
import os
import sys

from ptqsearch import load_calibration, load_model
from ptqsearch.bayesopt import BOConfig
from ptqsearch.model_graph import forward
from ptqsearch.search import run_qrater

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def accuracy(model, data, plan=None):
    correct = total = 0
    for x, y in data.batches(200):
        logits, _ = forward(model, x, plan)
        correct += int((logits.argmax(axis=1) == y).sum())
        total += len(y)
    return correct / total


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixture", default=os.path.join(ROOT, "fixtures", "cnn-digits"))
    ap.add_argument("--bits", type=int, nargs="+", default=[3, 4])
    ap.add_argument("--bo-extra", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = load_model(os.path.join(args.fixture, "model"))
    calib = load_calibration(os.path.join(args.fixture, "calib"))
    evals = load_calibration(os.path.join(args.fixture, "eval"))
    fp = accuracy(model, evals)
    print(f"model {model.name}: full precision eval accuracy {fp:.4f}")

    for q in args.bits:
        bo = BOConfig(n_extra=args.bo_extra, seed=args.seed)
        with_bias, _ = run_qrater(model, calib, bo=bo, q_w=q, q_a=q, bias=True)
        without, _ = run_qrater(model, calib, bo=bo, q_w=q, q_a=q, bias=False)
        corrected = sorted(
            i for i, st in with_bias.states.items() if st.bias_corrected
        )
        acc_with = accuracy(model, evals, with_bias)
        acc_without = accuracy(model, evals, without)
        print(
            f"{q}/{q}: eval {acc_without:.4f} -> {acc_with:.4f} "
            f"({acc_with - acc_without:+.4f}); corrected layers: "
            f"{corrected if corrected else 'none kept'}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
