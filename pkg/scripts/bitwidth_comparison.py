#!/usr/bin/env python3
"""Searched clipping/rounding vs the MSE+RTN baseline across bit widths.

For each bit setting, quantize every eligible layer with (a) the MSE
threshold selector plus round-to-nearest and (b) the full searched
pipeline, then score both on the held-out eval split.

    python3 scripts/bitwidth_comparison.py
    python3 scripts/bitwidth_comparison.py --bits 2 3 4 6 8 --bo-extra 25
"""

import argparse
import os
import sys
import time

from ptqsearch import load_calibration, load_model
from ptqsearch.baselines import SELECTORS
from ptqsearch.bayesopt import BOConfig
from ptqsearch.model_graph import forward
from ptqsearch.search import run_baseline, run_qrater

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
    ap.add_argument("--bits", type=int, nargs="+", default=[3, 4, 8])
    ap.add_argument("--clip", default="mse", choices=sorted(SELECTORS))
    ap.add_argument("--bo-extra", type=int, default=0,
                    help="BO evaluations beyond the grid per phase (0 = grid only)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = load_model(os.path.join(args.fixture, "model"))
    calib = load_calibration(os.path.join(args.fixture, "calib"))
    evals = load_calibration(os.path.join(args.fixture, "eval"))

    fp = accuracy(model, evals)
    print(f"model {model.name}: full precision eval accuracy {fp:.4f}")
    print(f"{'bits':>5}  {args.clip + '+rtn':>10}  {'searched':>9}  {'delta':>7}  {'seconds':>7}")
    for q in args.bits:
        t0 = time.time()
        base = run_baseline(model, calib, SELECTORS[args.clip], q_w=q, q_a=q)
        plan, _ = run_qrater(
            model, calib,
            bo=BOConfig(n_extra=args.bo_extra, seed=args.seed),
            q_w=q, q_a=q,
        )
        acc_b = accuracy(model, evals, base)
        acc_q = accuracy(model, evals, plan)
        dt = time.time() - t0
        print(f"{q}/{q:>2}  {acc_b:>10.4f}  {acc_q:>9.4f}  {acc_q - acc_b:>+7.4f}  {dt:>7.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
