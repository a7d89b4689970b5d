"""Command-line interface: count | verify | bench | infer.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 config error.
COMBNET_SEED in the environment overrides --seed for every command.
"""

from __future__ import annotations

import os

# Pin kernel execution to one thread for reproducible benchmark timings.
# Must happen before numpy loads its BLAS.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys

import numpy as np

from .bench import run_benchmarks
from .config import NetConfig, REFERENCE_CONFIG, load_config
from .errors import CombnetError, ConfigError, InputError
from .forward import Backend, Mode, forward
from .graph import build_graph, count_flops, count_params, validate_config
from .pgm import read_pgm16
from .postprocess import (PhaseFrame, amplitude_from_phases, decode_heatmaps,
                          gate_visibility, lift_to_2_5d, normalize_input,
                          result_document)
from .verify import report_text, run_all
from .weights import load_weights

PARAM_TARGET = 41_000        # Table-2-class parameter budget (0.041M)
FLOP_TARGET = 35_000_000     # 0.035 GFLOPs


def _resolve_seed(args) -> int:
    env = os.environ.get("COMBNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"COMBNET_SEED={env!r} is not an integer") from exc
    return args.seed


def _load_cfg(args) -> NetConfig:
    return load_config(args.config) if args.config else REFERENCE_CONFIG


def cmd_count(args) -> int:
    cfg = _load_cfg(args)
    g = build_graph(cfg)
    rep = validate_config(g)
    p_total, p_rows = count_params(g, "inference")
    f_total, macs, f_rows = count_flops(g, "inference")
    params_by_name = {r.name: r.params for r in p_rows}
    flops_by_name = {r.name: (r.macs, r.flops) for r in f_rows}
    names = [r.name for r in p_rows]
    names += [r.name for r in f_rows if r.name not in params_by_name]
    merged = [(n, params_by_name.get(n, 0), *flops_by_name.get(n, (0, 0)))
              for n in names]

    lines = [f"# combnet count  config_hash={cfg.config_hash():08x} "
             f"input={cfg.input_h}x{cfg.input_w}",
             f"{'layer':<18}{'params':>10}{'MACs':>14}{'FLOPs':>14}"]
    for name, p, m, f in merged:
        lines.append(f"{name:<18}{p:>10}{m:>14}{f:>14}")
    lines.append("-" * 56)
    lines.append(f"{'total (inference)':<18}{p_total:>10}{macs:>14}{f_total:>14}")
    pf_total, _ = count_params(g, "full")
    ff_total, fmacs, _ = count_flops(g, "full")
    lines.append(f"{'total (training)':<18}{pf_total:>10}{fmacs:>14}{ff_total:>14}")
    lines.append(f"params vs {PARAM_TARGET / 1e6:.3f}M target: "
                 f"{(p_total / PARAM_TARGET - 1) * 100:+.1f}%")
    lines.append(f"FLOPs  vs {FLOP_TARGET / 1e9:.3f}G target: "
                 f"{(f_total / FLOP_TARGET - 1) * 100:+.1f}%")
    for wmsg in rep.warnings:
        lines.append(f"warning: {wmsg}")
    for emsg in rep.errors:
        lines.append(f"invariant violation: {emsg}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.csv:
        csv_lines = ["layer,params,macs,flops"]
        csv_lines += [f"{n},{p},{m},{f}" for n, p, m, f in merged]
        csv_lines.append(f"total,{p_total},{macs},{f_total}")
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(csv_lines) + "\n")
    return 0


def cmd_verify(args) -> int:
    seed = _resolve_seed(args)
    results = run_all(seed, conv_cases=args.cases, e2e_pairs=args.pairs)
    sys.stdout.write(report_text(results, seed))
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    seed = _resolve_seed(args)
    backends = ("reference", "optimized") if args.backend == "both" else (args.backend,)
    report = run_benchmarks(cfg, seed=seed, iters=args.iters, backends=backends)
    print(report.to_text(), end="")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return 0


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    # read every input up front: no partial output on missing files
    if args.amplitude:
        amplitude = read_pgm16(args.amplitude).astype(np.float32)
    else:
        paths = args.phases.split(",")
        if len(paths) != 4:
            raise InputError(f"--phases needs 4 comma-separated files, got {len(paths)}")
        frame = PhaseFrame(tuple(read_pgm16(p) for p in paths),
                           cfg.z_min_mm, cfg.z_max_mm)
        amplitude = amplitude_from_phases(frame, cfg.amplitude_coeffs)
    depth = read_pgm16(args.depth).astype(np.float64)
    ws = load_weights(args.weights)

    g = build_graph(cfg)
    image, tf = normalize_input(amplitude, (cfg.input_h, cfg.input_w))
    backend = Backend(args.backend)
    heads = forward(g, ws, image, backend, Mode.INFERENCE_HEADS)
    kps = decode_heatmaps(heads.primary_heatmaps, cfg.conf_threshold,
                          (cfg.input_h, cfg.input_w))
    hands, early_out = gate_visibility(kps, heads.visibility_logits,
                                       cfg.kp_vis_threshold,
                                       cfg.hand_vis_threshold, cfg.hands)
    if not early_out:
        hands = lift_to_2_5d(hands, depth, cfg.depth_window,
                             (cfg.z_min_mm, cfg.z_max_mm), tf)
    doc = result_document(hands, early_out)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="combnet",
                                description="Compact 2.5D hand-pose network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    pc = sub.add_parser("count", help="per-layer parameter/FLOP accounting")
    pc.add_argument("--config")
    pc.add_argument("--csv")
    pc.set_defaults(fn=cmd_count)

    pv = sub.add_parser("verify", help="run oracle-equivalence and gradient suites")
    pv.add_argument("--seed", type=int, default=2024)
    pv.add_argument("--cases", type=int, default=100)
    pv.add_argument("--pairs", type=int, default=20)
    pv.set_defaults(fn=cmd_verify)

    pb = sub.add_parser("bench", help="micro-benchmark the kernels")
    pb.add_argument("--config")
    pb.add_argument("--backend", choices=["reference", "optimized", "both"],
                    default="both")
    pb.add_argument("--iters", type=int, default=10)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--csv")
    pb.set_defaults(fn=cmd_bench)

    pi = sub.add_parser("infer", help="single-frame inference to JSON")
    pi.add_argument("--config")
    pi.add_argument("--weights", required=True)
    src = pi.add_mutually_exclusive_group(required=True)
    src.add_argument("--amplitude", help="amplitude image (16-bit PGM)")
    src.add_argument("--phases", help="4 comma-separated phase images (16-bit PGM)")
    pi.add_argument("--depth", required=True, help="depth image in mm (16-bit PGM)")
    pi.add_argument("--backend", choices=["reference", "optimized"],
                    default="optimized")
    pi.add_argument("--out", help="output JSON path (default: stdout)")
    pi.set_defaults(fn=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except CombnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
