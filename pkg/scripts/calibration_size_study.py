#!/usr/bin/env python3
"""How many calibration samples does the search actually need?

Subsamples the calibration split to k samples per class, reruns the
search at a fixed bit width, and reports calibration vs eval accuracy.
The gap between the two columns is the overfit of the searched
hyper-parameters to the calibration set.

    python3 scripts/calibration_size_study.py --per-class 2 5 10 25 64
"""

import argparse
import os
import sys

from ptqsearch import load_calibration, load_model
from ptqsearch.bayesopt import BOConfig
from ptqsearch.model_graph import forward, subset_per_class
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
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--per-class", type=int, nargs="+", default=[2, 5, 10, 25, 64])
    ap.add_argument("--bo-extra", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = load_model(os.path.join(args.fixture, "model"))
    calib = load_calibration(os.path.join(args.fixture, "calib"))
    evals = load_calibration(os.path.join(args.fixture, "eval"))
    fp = accuracy(model, evals)
    print(f"model {model.name}, {args.bits}-bit, full precision eval {fp:.4f}")
    print(f"{'samples':>8}  {'calib acc':>9}  {'eval acc':>8}  {'gap':>7}")

    for k in args.per_class:
        sub = subset_per_class(calib, k, seed=args.seed)
        plan, _ = run_qrater(
            model, sub,
            bo=BOConfig(n_extra=args.bo_extra, seed=args.seed),
            q_w=args.bits, q_a=args.bits,
        )
        acc_c = accuracy(model, sub, plan)
        acc_e = accuracy(model, evals, plan)
        total = sum(len(y) for _, y in sub.batches(512))
        print(f"{total:>8}  {acc_c:>9.4f}  {acc_e:>8.4f}  {acc_c - acc_e:>+7.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
