"""Command line front end.

Subcommands:
  quantize   run a clip/round search (or a baseline) and write artifacts
  eval       report accuracy and cross-entropy, optionally under a plan
  sweep      dump one layer/phase objective grid as CSV
  trace      loss along a straight line between two weight sets
  correlate  quantization-error vs loss study for one layer
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .baselines import SELECTORS
from .bayesopt import BOConfig
from .diagnostics import correlation_study, interpolate_trajectory, plan_weight_set
from .errors import ArgumentError, DegenerateScaleError, DimensionError, FormatError
from .model_graph import load_calibration, load_model, save_model, subset_per_class
from .quant import QuantizationPlan
from .search import (
    METRICS,
    PHASES,
    GridSpec,
    Objective,
    QuantizableLayerSet,
    run_baseline,
    run_qrater,
    sweep_phase,
    write_trace_jsonl,
)

log = logging.getLogger(__name__)

CLIP_METHODS = ("mse", "kl", "aciq", "qrater")


@dataclass
class RunConfig:
    """Everything a quantize run needs, validated before any compute."""

    model_dir: str
    calib_dir: str
    out_dir: str
    q_w: int = 8
    q_a: int = None
    clip: str = "qrater"
    order: str = "second"
    grid: GridSpec = None
    bo: BOConfig = None
    include_first: bool = False
    only: list = None
    exclude: tuple = ()
    metric: str = "top1_accuracy"
    calib_per_class: int = None
    batch_size: int = 64
    threads: int = 1
    bias: bool = True
    eval_dir: str = None

    def validate(self):
        if not 2 <= self.q_w <= 8:
            raise ArgumentError(f"weight bits must be in [2, 8], got {self.q_w}")
        q_a = self.q_w if self.q_a is None else self.q_a
        if not 2 <= q_a <= 8:
            raise ArgumentError(f"activation bits must be in [2, 8], got {q_a}")
        if self.clip not in CLIP_METHODS:
            raise ArgumentError(f"unknown clip method {self.clip!r}")
        if self.order not in ("rtn", "first", "second"):
            raise ArgumentError(f"unknown rounding order {self.order!r}")
        if self.clip != "qrater" and self.order != "rtn":
            raise ArgumentError(
                f"clip method {self.clip!r} pairs with round-to-nearest only; pass --round rtn"
            )
        if self.metric not in METRICS:
            raise ArgumentError(f"unknown metric {self.metric!r}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch size must be >= 1, got {self.batch_size}")
        if self.threads < 1:
            raise ArgumentError(f"threads must be >= 1, got {self.threads}")
        if self.bo is not None and self.bo.n_extra < 0:
            raise ArgumentError(f"bo probe count must be >= 0, got {self.bo.n_extra}")
        if self.calib_per_class is not None and self.calib_per_class < 1:
            raise ArgumentError(f"--calib-per-class must be >= 1, got {self.calib_per_class}")


def _parse_grid_triple(text, name):
    parts = text.split(",")
    if len(parts) != 3:
        raise ArgumentError(f"{name} must be start,stop,step, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ArgumentError(f"{name} must be three numbers, got {text!r}") from None


def _parse_layer_list(text):
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ArgumentError(f"layer list must be comma-separated integers, got {text!r}") from None


def _load_inputs(cfg_or_args, model_dir, calib_dir, per_class=None):
    model = load_model(model_dir)
    calib = load_calibration(calib_dir)
    if tuple(calib.input_shape) != tuple(model.input_shape):
        raise FormatError(
            f"calibration input shape {tuple(calib.input_shape)} does not match "
            f"model input shape {tuple(model.input_shape)}"
        )
    if per_class is not None:
        requested = per_class * calib.num_classes
        if requested > calib.count:
            raise ArgumentError(
                f"requested {requested} calibration samples ({per_class} per class) "
                f"but only {calib.count} are available"
            )
        calib = subset_per_class(calib, per_class)
    return model, calib


def _metric_block(objective, view):
    acc, ce = objective.stats(view)
    return {"top1_accuracy": acc, "cross_entropy": ce}


def _quantized_model(model, plan):
    layers = []
    for layer in model.layers:
        w = plan.weight(layer.index)
        b = plan.bias(layer.index)
        layers.append(
            dc_replace(
                layer,
                weights=w if w is not None else layer.weights,
                bias=b if b is not None else layer.bias,
            )
        )
    return dc_replace(model, layers=layers)


def cmd_quantize(cfg):
    cfg.validate()
    q_a = cfg.q_w if cfg.q_a is None else cfg.q_a
    model, calib = _load_inputs(cfg, cfg.model_dir, cfg.calib_dir, cfg.calib_per_class)
    layers = QuantizableLayerSet.build(
        model, include_first=cfg.include_first, only=cfg.only, exclude=cfg.exclude
    )
    if not layers.included:
        raise ArgumentError("no quantizable layers selected")
    objective = Objective(
        model, calib, metric=cfg.metric, batch_size=cfg.batch_size, threads=cfg.threads
    )
    log.info("quantizing %s: %d layers, W%d/A%d, clip=%s round=%s",
             model.name, len(layers.included), cfg.q_w, q_a, cfg.clip, cfg.order)

    full_precision = _metric_block(objective, None)
    baseline_plan = run_baseline(
        model, calib, SELECTORS["mse"], layers, q_w=cfg.q_w, q_a=q_a, batch_size=cfg.batch_size
    )
    baseline = _metric_block(objective, baseline_plan)

    traces = None
    if cfg.clip == "qrater":
        plan, traces = run_qrater(
            model,
            calib,
            layers,
            cfg.grid,
            cfg.bo,
            objective,
            q_w=cfg.q_w,
            q_a=q_a,
            order=cfg.order,
            bias=cfg.bias,
        )
    elif cfg.clip == "mse":
        plan = baseline_plan
    else:
        plan = run_baseline(
            model, calib, SELECTORS[cfg.clip], layers, q_w=cfg.q_w, q_a=q_a, batch_size=cfg.batch_size
        )
    final = _metric_block(objective, plan)

    os.makedirs(cfg.out_dir, exist_ok=True)
    plan.save(cfg.out_dir)
    save_model(_quantized_model(model, plan), os.path.join(cfg.out_dir, "quantized"))
    if traces is not None:
        write_trace_jsonl(traces, os.path.join(cfg.out_dir, "trace.jsonl"))

    summary = {
        "model": model.name,
        "bits": {"weights": cfg.q_w, "activations": q_a},
        "clip": cfg.clip,
        "round": cfg.order if cfg.clip == "qrater" else "rtn",
        "metric": cfg.metric,
        "calibration_count": calib.count,
        "layers_quantized": layers.included,
        "accuracy": {
            "full_precision": full_precision,
            "baseline_mse_rtn": baseline,
            "final": final,
        },
        "plan": plan.to_records(),
    }
    if cfg.clip == "qrater":
        bo = cfg.bo or BOConfig()
        summary["bo"] = {"n_extra": bo.n_extra, "kappa": bo.kappa, "seed": bo.seed}
    if cfg.eval_dir:
        eval_calib = load_calibration(cfg.eval_dir)
        eval_obj = Objective(
            model, eval_calib, batch_size=cfg.batch_size, threads=cfg.threads
        )
        summary["eval"] = {
            "count": eval_calib.count,
            "full_precision": _metric_block(eval_obj, None),
            "baseline_mse_rtn": _metric_block(eval_obj, baseline_plan),
            "final": _metric_block(eval_obj, plan),
        }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")

    print(json.dumps({"full_precision": full_precision, "baseline_mse_rtn": baseline, "final": final}))
    return 0


def cmd_eval(args):
    model, calib = _load_inputs(args, args.model_dir, args.calib_dir)
    plan = QuantizationPlan.load(args.plan, model) if args.plan else None
    objective = Objective(model, calib, batch_size=args.batch_size, threads=args.threads)
    print(json.dumps(_metric_block(objective, plan)))
    return 0


def _write_csv(path, header, rows):
    if path:
        f = open(path, "w", newline="")
    else:
        f = sys.stdout
    try:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if path:
            f.close()


def cmd_sweep(args):
    model, calib = _load_inputs(args, args.model_dir, args.calib_dir)
    plan = QuantizationPlan.load(args.plan, model) if args.plan else None
    grid = _grid_from_args(args)
    rows = sweep_phase(
        model,
        calib,
        args.layer,
        args.phase,
        plan,
        grid,
        q_w=args.bits,
        q_a=args.abits,
        order=args.round,
        gamma_c=args.gamma_c,
        batch_size=args.batch_size,
        threads=args.threads,
        metric=args.metric,
    )
    names = [k for k in rows[0] if k != "objective"]
    _write_csv(args.out, names + ["objective"], [[r[n] for n in names] + [r["objective"]] for r in rows])
    return 0


def _endpoint_weights(model, spec):
    if spec == "fp":
        return plan_weight_set(model, None)
    return plan_weight_set(model, QuantizationPlan.load(spec, model))


def cmd_trace(args):
    model, calib = _load_inputs(args, args.model_dir, args.calib_dir)
    w1 = _endpoint_weights(model, args.plan_a)
    w2 = _endpoint_weights(model, args.plan_b)
    report = interpolate_trajectory(model, w1, w2, args.points, calib, batch_size=args.batch_size)
    _write_csv(args.out, ["alpha", "loss"], list(zip(report.alphas, report.losses)))
    print(json.dumps({"points": len(report.alphas), "violations": len(report.violations)}))
    return 0


def _random_configs(n, q, order, seed):
    rng = np.random.default_rng(seed)
    configs = []
    for _ in range(n):
        cfg = {"q": q, "order": order, "gamma_c": float(rng.uniform(0.1, 1.0))}
        if order in ("first", "second"):
            cfg["gamma_n"] = float(rng.uniform(-1.0, 1.0))
        if order == "second":
            cfg["gamma_s"] = float(rng.uniform(0.0, 1.0))
        configs.append(cfg)
    return configs


def cmd_correlate(args):
    model, calib = _load_inputs(args, args.model_dir, args.calib_dir)
    if args.configs:
        with open(args.configs) as f:
            configs = json.load(f)
        if not isinstance(configs, list):
            raise FormatError("--configs file must hold a JSON array of config objects")
        for cfg in configs:
            cfg.setdefault("q", args.bits)
            cfg.setdefault("order", args.round)
    else:
        configs = _random_configs(args.random, args.bits, args.round, args.seed)
    report = correlation_study(model, args.layer, configs, calib, batch_size=args.batch_size)
    rows = [
        [qerr, loss, json.dumps(cfg, sort_keys=True)]
        for qerr, loss, cfg in zip(report.qerrs, report.losses, report.configs)
    ]
    _write_csv(args.out, ["qerr", "loss", "params_json"], rows)
    print(json.dumps({"pearson_r": report.r, "note": report.note}))
    return 0


def _grid_from_args(args):
    spec = GridSpec()
    if getattr(args, "grid_gamma_c", None):
        spec = dc_replace(spec, gamma_c=_parse_grid_triple(args.grid_gamma_c, "--grid-gamma-c"))
    if getattr(args, "grid_gamma_n", None):
        spec = dc_replace(spec, gamma_n=_parse_grid_triple(args.grid_gamma_n, "--grid-gamma-n"))
    if getattr(args, "grid_gamma_s", None):
        spec = dc_replace(spec, gamma_s=_parse_grid_triple(args.grid_gamma_s, "--grid-gamma-s"))
    return spec


def _add_common(p):
    p.add_argument("model_dir", help="model directory (manifest.json + blobs)")
    p.add_argument("calib_dir", help="calibration directory (calib.json + blobs)")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--verbose", action="store_true", help="log search progress to stderr")


def _add_grid_flags(p):
    p.add_argument("--grid-gamma-c", metavar="START,STOP,STEP", help="clipping ratio grid override")
    p.add_argument("--grid-gamma-n", metavar="START,STOP,STEP", help="rounding gamma_n grid override")
    p.add_argument("--grid-gamma-s", metavar="START,STOP,STEP", help="rounding gamma_s grid override")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ptqsearch", description="Search-based post-training quantization toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a model and write plan/trace/summary")
    _add_common(q)
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--bits", type=int, default=8, help="weight bits (2..8)")
    q.add_argument("--abits", type=int, default=None, help="activation bits (default: --bits)")
    q.add_argument("--clip", choices=CLIP_METHODS, default="qrater")
    q.add_argument("--round", choices=("rtn", "first", "second"), default="second")
    q.add_argument("--bo-extra", type=int, default=50, help="BO probes per phase (0 = grid only)")
    q.add_argument("--kappa", type=float, default=2.576, help="UCB exploration weight")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--metric", choices=METRICS, default="top1_accuracy")
    q.add_argument("--include-first", action="store_true", help="also quantize the first weighted layer")
    q.add_argument("--layers", help="comma-separated layer indices to quantize (overrides default)")
    q.add_argument("--exclude", help="comma-separated layer indices to skip")
    q.add_argument("--calib-per-class", type=int, default=None, help="subsample N per class (seeded)")
    q.add_argument("--no-bias-corr", action="store_true", help="disable the bias correction phase")
    q.add_argument("--eval-dir", default=None, help="held-out set to report in the summary")
    _add_grid_flags(q)

    e = sub.add_parser("eval", help="evaluate a model, optionally under a saved plan")
    _add_common(e)
    e.add_argument("--plan", default=None, help="plan.json (or its directory) to apply")

    s = sub.add_parser("sweep", help="CSV of one layer/phase objective grid")
    _add_common(s)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--phase", choices=[p for p in PHASES if p != "bias"], required=True)
    s.add_argument("--plan", default=None, help="plan supplying frozen earlier layers")
    s.add_argument("--gamma-c", type=float, default=None, help="clipping ratio for round-phase sweeps")
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--abits", type=int, default=None)
    s.add_argument("--round", choices=("first", "second"), default="second")
    s.add_argument("--metric", choices=METRICS, default="top1_accuracy")
    s.add_argument("--out", default=None, help="CSV path (default: stdout)")
    _add_grid_flags(s)

    t = sub.add_parser("trace", help="loss along the line between two weight sets")
    _add_common(t)
    t.add_argument("--plan-a", required=True, help="plan path, or 'fp' for original weights")
    t.add_argument("--plan-b", required=True, help="plan path, or 'fp' for original weights")
    t.add_argument("--points", type=int, default=21)
    t.add_argument("--out", default=None, help="CSV path (default: stdout)")

    c = sub.add_parser("correlate", help="quantization error vs loss for one layer")
    _add_common(c)
    c.add_argument("--layer", type=int, required=True)
    group = c.add_mutually_exclusive_group(required=True)
    group.add_argument("--configs", help="JSON file with a list of quantization configs")
    group.add_argument("--random", type=int, help="number of random configs to draw")
    c.add_argument("--bits", type=int, default=8, help="q for configs that do not carry one")
    c.add_argument("--round", choices=("rtn", "first", "second"), default="second")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None, help="CSV path (default: stdout)")
    return parser


def _config_from_args(args):
    return RunConfig(
        model_dir=args.model_dir,
        calib_dir=args.calib_dir,
        out_dir=args.out,
        q_w=args.bits,
        q_a=args.abits,
        clip=args.clip,
        order=args.round,
        grid=_grid_from_args(args),
        bo=BOConfig(n_extra=args.bo_extra, kappa=args.kappa, seed=args.seed),
        include_first=args.include_first,
        only=_parse_layer_list(args.layers) if args.layers else None,
        exclude=tuple(_parse_layer_list(args.exclude)) if args.exclude else (),
        metric=args.metric,
        calib_per_class=args.calib_per_class,
        batch_size=args.batch_size,
        threads=args.threads,
        bias=not args.no_bias_corr,
        eval_dir=args.eval_dir,
    )


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "quantize":
            return cmd_quantize(_config_from_args(args))
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "trace":
            return cmd_trace(args)
        return cmd_correlate(args)
    except (ArgumentError, FormatError, DimensionError, DegenerateScaleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
