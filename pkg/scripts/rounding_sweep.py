#!/usr/bin/env python3
"""Print the rounding-parameter landscape for one layer.

Sweeps gamma_n (rows) against gamma_s (columns) at a fixed clipping
ratio and prints the calibration accuracy grid, marking the argmax.
Useful for eyeballing how much headroom the rounding search has over
round-to-nearest (the gamma_n = 0 row).

    python3 scripts/rounding_sweep.py --layer 10 --bits 3
"""

import argparse
import os
import sys

from ptqsearch import load_calibration, load_model
from ptqsearch.search import GridSpec, QuantizableLayerSet, sweep_phase

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixture", default=os.path.join(ROOT, "fixtures", "cnn-digits"))
    ap.add_argument("--layer", type=int, default=None,
                    help="layer index (default: last searchable layer)")
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--gamma-c", type=float, default=None,
                    help="clipping ratio (default: argmax of the clip sweep)")
    ap.add_argument("--step", type=float, default=0.25, help="gamma_n / gamma_s grid step")
    args = ap.parse_args()

    model = load_model(os.path.join(args.fixture, "model"))
    calib = load_calibration(os.path.join(args.fixture, "calib"))
    layer_i = args.layer
    if layer_i is None:
        layer_i = QuantizableLayerSet.build(model).included[-1]

    grid = GridSpec(
        gamma_n=(-1.0, 1.0, args.step),
        gamma_s=(0.0, 1.0, args.step),
    )
    rows = sweep_phase(
        model, calib, layer_i, "weight_round",
        grid=grid, q_w=args.bits, gamma_c=args.gamma_c,
    )

    ns = sorted({r["gamma_n"] for r in rows})
    ss = sorted({r["gamma_s"] for r in rows})
    table = {(r["gamma_n"], r["gamma_s"]): r["objective"] for r in rows}
    best = max(rows, key=lambda r: r["objective"])

    print(f"layer {layer_i} ({model.layer(layer_i).kind}), {args.bits}-bit weights, "
          f"calibration accuracy by (gamma_n, gamma_s):")
    print(" " * 9 + "".join(f"  s={s:<5.2f}" for s in ss))
    for n in ns:
        cells = []
        for s in ss:
            v = table[(n, s)]
            mark = "*" if (n, s) == (best["gamma_n"], best["gamma_s"]) else " "
            cells.append(f" {v:.4f}{mark}")
        tag = " (rtn)" if n == 0.0 else ""
        print(f"n={n:>+5.2f} {''.join(cells)}{tag}")
    print(f"best: gamma_n={best['gamma_n']:+.2f} gamma_s={best['gamma_s']:.2f} "
          f"accuracy {best['objective']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
