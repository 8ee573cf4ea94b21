"""Command-line entry point (``gfa-oamp``).

Every subcommand accepts ``--config FILE`` plus one flag per configuration
field; flags override file values.  The worker count defaults to the
``GFA_OAMP_WORKERS`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .algorithms import run_amp, run_ist, run_oamp
from .denoisers import Prior, check_divergence_free, df_transform, make_factory
from .gfa import gfa_run, verify_lemma2
from .harness import CSV_HEADER, SWEEP_AXES, ConfigError, ExperimentConfig, run_experiment, sweep, trial_seed
from .linear_model import dump_instance, generate_instance, load_instance
from .state_evolution import se_run

WORKERS_ENV = "GFA_OAMP_WORKERS"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value file")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, action="store_const", const="true", default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _config(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if getattr(args, f.name) is not None}
    if "workers" not in overrides and os.environ.get(WORKERS_ENV):
        overrides["workers"] = os.environ[WORKERS_ENV]
    if args.config is not None:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_mapping(overrides)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _write_rows(rows, out) -> None:
    w = csv.DictWriter(out, CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.instance is not None:
        return _run_single(cfg, load_instance(args.instance))
    if args.dump_instance is not None:
        dump_instance(generate_instance(cfg.n, cfg.delta, cfg.sigma0_2, cfg.prior, trial_seed(cfg.seed, 0)),
                      args.dump_instance)
    report = run_experiment(cfg)
    sys.stdout.write(report.csv_text())
    results = report.threshold_results()
    for name, ok in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}", file=sys.stderr)
    if report.failed_trials:
        print(f"{len(report.failed_trials)} trial(s) failed, see failed_trials_{cfg.hash}.json", file=sys.stderr)
    return 0 if report.passed() else 1


def _run_single(cfg: ExperimentConfig, inst) -> int:
    prior, rule = cfg.prior, cfg.rule
    factory = make_factory(cfg.schedule_name, prior, cfg.kappa, cfg.scale_arg, rule)
    se = se_run(prior, inst.delta, inst.sigma0_2, factory, cfg.T, rule)
    if cfg.algorithm == "amp":
        traj = run_amp(inst, list(se.denoisers), cfg.T)
    elif cfg.algorithm == "oamp" and cfg.tau_source == "empirical":
        base = make_factory(cfg.schedule_name[3:-1], prior, cfg.kappa)
        traj = run_oamp(inst, base, prior, cfg.T, "empirical", cfg.scale_arg, rule)
    else:
        traj = run_ist(inst, list(se.denoisers), cfg.T)
    rows = [{"t": t, "source": "EMP", "mse": m, "stderr": "", "tau2": "", "extra": "trials=1"}
            for t, m in enumerate(traj.mse)]
    _write_rows(rows + list(se.csv_rows()), sys.stdout)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    reports, summary = sweep(cfg, args.axis, _floats(args.values))
    w = csv.DictWriter(sys.stdout, ["value", "status", "emp_final", "se_final", "gfa_final"],
                       extrasaction="ignore", lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(summary)
    return 0 if all(row["status"] == "ok" for row in summary) else 1


def cmd_se(args) -> int:
    cfg = _config(args)
    factory = make_factory(cfg.schedule_name, cfg.prior, cfg.kappa, cfg.scale_arg, cfg.rule)
    trace = se_run(cfg.prior, cfg.delta, cfg.sigma0_2, factory, cfg.T, cfg.rule)
    _write_rows(trace.csv_rows(), sys.stdout)
    return 0


def cmd_gfa(args) -> int:
    cfg = _config(args)
    factory = make_factory(cfg.schedule_name, cfg.prior, cfg.kappa, cfg.scale_arg, cfg.rule)
    op = gfa_run(cfg.prior, cfg.delta, cfg.sigma0_2, factory, cfg.T, cfg.mc_samples, cfg.seed,
                 cfg.gfa_replicas, cfg.workers)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfg.to_dict(), "config_hash": cfg.hash, "order_parameters": op.to_dict()}
    (out / f"order_parameters_{cfg.hash}.json").write_text(json.dumps(payload, indent=1))
    _write_rows(op.csv_rows(), sys.stdout)
    return 0


def cmd_verify_df(args) -> int:
    cfg = _config(args)
    base_name = cfg.denoiser[3:-1] if cfg.denoiser.startswith("df(") else cfg.denoiser
    ok = True
    print("epsilon,tau,residual,pass")
    for eps in _floats(args.epsilons):
        prior = Prior(eps, cfg.amp_variance)
        base = make_factory(base_name, prior, cfg.kappa)
        for tau in _floats(args.taus):
            eta = df_transform(base(tau), prior, tau, cfg.scale_arg, cfg.rule)
            res = check_divergence_free(eta, prior, tau, cfg.rule)
            good = abs(res) <= args.tol
            ok &= good
            print(f"{eps!r},{tau!r},{res!r},{'PASS' if good else 'FAIL'}")
    return 0 if ok else 1


def cmd_verify_lemma2(args) -> int:
    cfg = _config(args)
    base_name = cfg.denoiser[3:-1] if cfg.denoiser.startswith("df(") else cfg.denoiser
    base = make_factory(base_name, cfg.prior, cfg.kappa)
    rep = verify_lemma2(cfg.prior, cfg.delta, cfg.sigma0_2, base, cfg.T, cfg.mc_samples, cfg.seed,
                        args.replicas, cfg.scale_arg, cfg.rule, cfg.workers)
    print(json.dumps(rep.to_dict(), indent=1))
    ok = rep.passed(args.g_sigmas, args.k_tol)
    print(f"{'PASS' if ok else 'FAIL'} lemma2", file=sys.stderr)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfa-oamp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="trials + SE + GFA comparison")
    _add_config_flags(p)
    p.add_argument("--dump-instance", type=Path, help="also write the first trial's instance here")
    p.add_argument("--instance", type=Path, help="run one trajectory on a dumped instance instead")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one experiment per parameter value")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("se", help="state evolution trace")
    _add_config_flags(p)
    p.set_defaults(func=cmd_se)

    p = sub.add_parser("gfa", help="order-parameter recursion")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gfa)

    p = sub.add_parser("verify-df", help="quadrature check of E[eta'] = 0 for the divergence-free transform")
    _add_config_flags(p)
    p.add_argument("--taus", default="0.1,0.5,1,2")
    p.add_argument("--epsilons", default="0.05,0.1,0.3")
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_verify_df)

    p = sub.add_parser("verify-lemma2", help="zero response for a divergence-free schedule")
    _add_config_flags(p)
    p.add_argument("--replicas", type=int, default=10)
    p.add_argument("--g-sigmas", type=float, default=4.0)
    p.add_argument("--k-tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_verify_lemma2)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
