"""Command-line entry point: ``dualguard simulate|optimize|verify|repro``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .adversary import FaultKind, FaultSpec, covert_attack
from .detectors import DecisionLabel
from .harness import (ConfigError, DivergedRunError, design_loop, evaluation_start, export_trace,
                      load_config, run_batch)
from .lti import simulate
from .optimizer import hminus_index, optimize_gain
from .synthesis import NotStabilizingError, stealth_operator, verify_bezout

BEZOUT_TOL = 1e-8
KERNEL_TOL = 1e-8
RANK_TOL = 1e-8
CALIBRATION_STEPS = 10_000
CALIBRATION_BAND = (0.005, 0.015)

REPRO = {
    "uav": ("uav_nominal", "uav_fault", "uav_covert", "uav_fault_covert"),
    "rlc": ("rlc_nominal", "rlc_fault", "rlc_covert", "rlc_fault_covert"),
}
REPRO_GAINS = {
    "uav": ("uav_covert", "uav_covert_ga", "uav_covert_gamma"),
    "rlc": ("rlc_covert", "rlc_covert_ga", "rlc_covert_gamma"),
}


def _load(ref, seed):
    cfg = load_config(ref)
    return cfg if seed is None else cfg.with_seed(seed)


def cmd_simulate(args) -> int:
    cfg = _load(args.scenario, args.seed)
    seeds = range(cfg.seed, cfg.seed + args.runs)
    try:
        batch = run_batch(cfg, seeds=seeds)
    except DivergedRunError as exc:
        print(f"error: run diverged: {exc}", file=sys.stderr)
        if args.out:
            export_trace(exc.trace.run(0), args.out)
        return 1
    start = evaluation_start(cfg)
    labels = Counter(l.value for l in batch.modal_label(start))
    print(f"scenario {cfg.name}: {args.runs} run(s) from seed {cfg.seed}, horizon {cfg.horizon}")
    print(f"  J   > {batch.J_th:.4f}: {np.mean(batch.raw_J[:, start:]):.4f} of steps from k={start}")
    print(f"  J_u > {batch.J_th_u:.4f}: {np.mean(batch.raw_Ju[:, start:]):.4f} of steps from k={start}")
    print("  modal labels: " + ", ".join(f"{k}={v}" for k, v in sorted(labels.items())))
    if args.out:
        export_trace(batch.run(0), args.out)
        print(f"  trace written to {args.out}")
    return 0


def cmd_optimize(args) -> int:
    cfg = _load(args.scenario, args.seed)
    design = design_loop(cfg)
    overrides = {"s": cfg.s}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    search = dataclasses.replace(cfg.controller.search, **overrides)
    L = design.params.L
    before = hminus_index(cfg.plant, L, design.params.F, cfg.s)
    result = optimize_gain(cfg.plant, L, search)
    print(f"scenario {cfg.name}: {search.mode} search, s={cfg.s}, {result.evaluations} evaluations")
    print(f"  configured F: H- index {before:.6f}")
    if not result.feasible:
        print("  no stabilizing feasible gain found")
        return 1
    with np.printoptions(precision=6, suppress=True):
        print(f"  optimized F (H- index {hminus_index(cfg.plant, L, result.F_star, cfg.s):.6f}):")
        print("  " + str(result.F_star).replace("\n", "\n  "))
    return 0


def verify_checks(cfg):
    """Structural and statistical self-checks; yields ``(name, passed, detail)``."""
    design = design_loop(cfg)
    f = design.factors
    res = verify_bezout(f)
    yield "bezout identity", res <= BEZOUT_TOL, f"max residual {res:.2e}"

    # covert pair lies in the plant kernel: Nhat a_u + Mhat a_y = 0
    a_u = np.zeros((200, cfg.plant.m))
    a_u[10:] = 0.5
    a_u, a_y = covert_attack(cfg.plant, a_u)
    kern = simulate(f.Nhat, a_u) + simulate(f.Mhat, a_y)
    dev = float(np.max(np.abs(kern)))
    yield "covert attack in plant kernel", dev <= KERNEL_TOL, f"max |Nhat a_u + Mhat a_y| {dev:.2e}"

    # a fault leaves the twin residual zero (noiseless)
    fcfg = cfg.replace(attack=None, horizon=300, simulate_noise=False,
                       fault=FaultSpec(FaultKind.PLANT, 100, (0.5,) * cfg.plant.n))
    tr = run_batch(fcfg, design=design)
    dev = float(np.max(np.abs(tr.r_u)))
    yield "fault in controller kernel", dev <= KERNEL_TOL, f"max |r_u| {dev:.2e}"

    s = 10
    sv = float(np.linalg.svd(stealth_operator(f, s), compute_uv=False).min())
    yield "no closed-loop stealthy attack", sv > RANK_TOL, f"sigma_min {sv:.4f} (s={s})"

    ncfg = cfg.replace(attack=None, fault=None, horizon=CALIBRATION_STEPS + cfg.burn_in)
    tr = run_batch(ncfg, design=design)
    lo, hi = CALIBRATION_BAND
    rate = float(np.mean(tr.raw_J[:, cfg.burn_in:]))
    yield "chi-square calibration (J)", lo <= rate <= hi, f"exceedance {rate:.4f} at alpha={cfg.alpha}"
    rate = float(np.mean(tr.raw_Ju[:, cfg.burn_in:]))
    yield "chi-square calibration (J_u)", lo <= rate <= hi, f"exceedance {rate:.4f} at alpha={cfg.alpha}"


def cmd_verify(args) -> int:
    cfg = _load(args.scenario, args.seed)
    ok = True
    for name, passed, detail in verify_checks(cfg):
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return 0 if ok else 1


def cmd_repro(args) -> int:
    out_dir = Path(args.out_dir or f"repro_{args.system}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in REPRO[args.system]:
        cfg = _load(name, args.seed)
        batch = run_batch(cfg, seeds=range(cfg.seed, cfg.seed + args.runs))
        export_trace(batch.run(0), out_dir / f"{name}.csv")
        labels = Counter(l.value for l in batch.modal_label(evaluation_start(cfg)))
        rows.append((name, labels))
    print(f"{'scenario':<22}" + "".join(f"{l.value:>16}" for l in DecisionLabel))
    for name, labels in rows:
        print(f"{name:<22}" + "".join(f"{labels.get(l.value, 0):>16}" for l in DecisionLabel))
    print()
    print(f"{'covert, gain':<22}{'H- index':>12}{'mean J_u':>12}")
    for name in REPRO_GAINS[args.system]:
        cfg = _load(name, args.seed)
        design = design_loop(cfg)
        batch = run_batch(cfg, seeds=range(cfg.seed, cfg.seed + args.runs), design=design)
        gamma = hminus_index(cfg.plant, design.params.L, design.params.F, cfg.s)
        print(f"{name:<22}{gamma:>12.4f}{np.mean(batch.J_u[:, evaluation_start(cfg):]):>12.3f}")
    print(f"\ntraces written to {out_dir}/")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualguard", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and summarize the detector outputs")
    p.add_argument("scenario", help="scenario file or bundled scenario name")
    p.add_argument("--out", help="write the first run's trace as CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="search for a detection-oriented feedback gain")
    p.add_argument("scenario")
    p.add_argument("--mode", choices=("grid", "stochastic"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("verify", help="structural and calibration self-checks")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("repro", help="run the benchmark scenario suite")
    p.add_argument("system", choices=sorted(REPRO))
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int, default=50)
    p.set_defaults(func=cmd_repro)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "runs", 1) < 1:
        print("error: --runs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, NotStabilizingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
