"""Experiment orchestration: finite-N trials, state evolution and GFA side by side.

A run draws ``trials`` independent instances, applies one fixed denoiser
schedule to each, and lines the trial-averaged mse up against the state
evolution trace and the GFA prediction for the same schedule.  Results go to a
long-format CSV (``t,source,mse,stderr,tau2,extra``) and a JSON report that
embeds the full configuration.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .algorithms import DivergenceError, run_amp, run_ist, run_oamp
from .denoisers import Prior, QuadratureRule, default_rule, make_factory
from .gfa import OrderParameters, gfa_run
from .linear_model import generate_instance
from .state_evolution import se_run

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ComparisonReport",
    "trial_seed",
    "point_seed",
    "run_experiment",
    "sweep",
    "SWEEP_AXES",
]

ALGORITHMS = ("ist", "amp", "oamp")
TAU_SOURCES = ("se", "gfa", "empirical")
DENOISERS = ("soft", "mmse_bg", "df(soft)", "df(mmse_bg)")
SWEEP_AXES = ("delta", "epsilon", "sigma0_2", "kappa")
CSV_HEADER = ("t", "source", "mse", "stderr", "tau2", "extra")

# fields that only affect where or how fast results are produced
_NOT_HASHED = ("output_dir", "workers")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 4096
    delta: float = 0.5
    sigma0_2: float = 0.01
    epsilon: float = 0.1
    amp_variance: float = 1.0
    algorithm: str = "oamp"
    denoiser: str = "df(mmse_bg)"
    kappa: float = 1.5
    scale: str = "normalized"
    tau_source: str = "se"
    T: int = 10
    trials: int = 100
    seed: int = 0
    mc_samples: int = 200_000
    gfa_replicas: int = 1
    skip_gfa: bool = False
    quad_order: int = 61
    output_dir: str = "results"
    workers: int = 1
    # acceptance thresholds; None means not declared
    max_rel_gap_se: Optional[float] = None
    max_gfa_sigmas: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("n", self.n >= 1, "must be at least 1"),
            ("delta", 0.0 < self.delta <= 1.0, "must lie in (0, 1]"),
            ("sigma0_2", self.sigma0_2 >= 0.0, "must be nonnegative"),
            ("epsilon", 0.0 <= self.epsilon <= 1.0, "must lie in [0, 1]"),
            ("amp_variance", self.amp_variance > 0.0, "must be positive"),
            ("algorithm", self.algorithm in ALGORITHMS, f"must be one of {', '.join(ALGORITHMS)}"),
            ("denoiser", self.denoiser in DENOISERS, f"must be one of {', '.join(DENOISERS)}"),
            ("kappa", self.kappa > 0.0, "must be positive"),
            ("tau_source", self.tau_source in TAU_SOURCES, f"must be one of {', '.join(TAU_SOURCES)}"),
            ("T", self.T >= 0, "must be nonnegative"),
            ("trials", self.trials >= 1, "must be at least 1"),
            ("mc_samples", self.mc_samples >= 2, "must be at least 2"),
            ("gfa_replicas", self.gfa_replicas >= 1, "must be at least 1"),
            ("quad_order", self.quad_order >= 2, "must be at least 2"),
            ("workers", self.workers >= 1, "must be at least 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, f"{msg}, got {getattr(self, name)!r}")
        if self.scale not in ("normalized", "unit"):
            try:
                float(self.scale)
            except ValueError:
                raise ConfigError("scale", f"must be 'normalized', 'unit' or a number, got {self.scale!r}") from None
        if self.tau_source == "empirical" and self.algorithm != "oamp":
            raise ConfigError("tau_source", "'empirical' is only available for oamp")
        for name in ("max_rel_gap_se", "max_gfa_sigmas"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(name, f"must be positive, got {value!r}")

    # -- (de)serialization ------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _NOT_HASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        """Build from string or typed values, converting by field type."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(key, "unknown field")
            kwargs[key] = _convert(key, types[key], raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "ExperimentConfig":
        """Read a flat ``key = value`` file; ``overrides`` win over file values."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        parser.read_string("[config]\n" + Path(path).read_text())
        values = dict(parser["config"])
        values.update(overrides or {})
        return cls.from_mapping(values)

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {'none' if value is None else str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    # -- derived objects ---------------------------------------------------

    @property
    def prior(self) -> Prior:
        return Prior(self.epsilon, self.amp_variance)

    @property
    def rule(self) -> QuadratureRule:
        return default_rule(self.quad_order)

    @property
    def scale_arg(self):
        return self.scale if self.scale in ("normalized", "unit") else float(self.scale)

    @property
    def schedule_name(self) -> str:
        """Denoiser family actually applied; OAMP always uses the divergence-free form."""
        if self.algorithm == "oamp" and not self.denoiser.startswith("df("):
            return f"df({self.denoiser})"
        return self.denoiser


def _convert(key: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    typ = str(typ)
    if "Optional" in typ or "None" in typ:
        if text.lower() in ("none", ""):
            return None
        typ = "float"
    try:
        if typ == "bool":
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {typ}") from None
    return text


# ---------------------------------------------------------------------------
# seeds


def _derive(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def trial_seed(master: int, trial: int) -> int:
    """Seed of trial ``trial``: 64 bits drawn from SeedSequence(master, spawn_key=(0, trial))."""
    return _derive(master, 0, trial)


def point_seed(master: int, index: int) -> int:
    """Master seed of sweep point ``index``; point 0 inherits ``master`` itself."""
    return int(master) if index == 0 else _derive(master, 1, index)


# ---------------------------------------------------------------------------
# report


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass(eq=False)
class ComparisonReport:
    config: ExperimentConfig
    t: np.ndarray
    emp_mse: np.ndarray
    emp_stderr: np.ndarray
    emp_tau2: Optional[np.ndarray]
    se_sigma2: np.ndarray
    se_tau2: np.ndarray
    gfa_mse: Optional[np.ndarray]
    gfa_stderr: Optional[np.ndarray]
    gfa_tau2: Optional[np.ndarray]
    trial_seeds: list
    failed_trials: list
    order_parameters: Optional[OrderParameters] = field(default=None, repr=False)
    wall_time: float = 0.0
    timestamp: str = ""

    @property
    def n_ok(self) -> int:
        return len(self.trial_seeds) - len(self.failed_trials)

    @property
    def rel_gap_se(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.emp_mse - self.se_sigma2) / self.se_sigma2

    @property
    def rel_gap_gfa(self) -> Optional[np.ndarray]:
        if self.gfa_mse is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.emp_mse - self.gfa_mse) / self.gfa_mse

    @property
    def gfa_sigmas(self) -> Optional[np.ndarray]:
        """|emp - gfa| in units of the combined standard error."""
        if self.gfa_mse is None:
            return None
        comb = np.sqrt(np.nan_to_num(self.emp_stderr) ** 2 + self.gfa_stderr**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(comb > 0, np.abs(self.emp_mse - self.gfa_mse) / comb, 0.0)

    def threshold_results(self) -> dict:
        """Declared thresholds mapped to pass/fail; undeclared ones are omitted."""
        out = {}
        cfg = self.config
        if self.failed_trials:
            out["no_failed_trials"] = False
        if cfg.max_rel_gap_se is not None:
            out["max_rel_gap_se"] = bool(np.nanmax(np.abs(self.rel_gap_se)) <= cfg.max_rel_gap_se)
        if cfg.max_gfa_sigmas is not None:
            sig = self.gfa_sigmas
            out["max_gfa_sigmas"] = sig is not None and bool(np.max(sig) <= cfg.max_gfa_sigmas)
        return out

    def passed(self) -> bool:
        return all(self.threshold_results().values())

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, t in enumerate(self.t):
            tau2 = None if self.emp_tau2 is None else self.emp_tau2[i]
            w.writerow([t, "EMP", _fmt(self.emp_mse[i]), _fmt(self.emp_stderr[i]), _fmt(tau2), f"trials={self.n_ok}"])
        for i, t in enumerate(self.t):
            w.writerow([t, "SE", _fmt(self.se_sigma2[i]), _fmt(0.0), _fmt(self.se_tau2[i]),
                        f"rel_gap={_fmt(self.rel_gap_se[i])}"])
        if self.gfa_mse is not None:
            gap = self.rel_gap_gfa
            for i, t in enumerate(self.t):
                w.writerow([t, "GFA", _fmt(self.gfa_mse[i]), _fmt(self.gfa_stderr[i]), _fmt(self.gfa_tau2[i]),
                            f"rel_gap={_fmt(gap[i])}"])
        return buf.getvalue()

    def rows(self) -> list[dict]:
        out = []
        for i, t in enumerate(self.t):
            row = {
                "t": int(t),
                "emp_mse": float(self.emp_mse[i]),
                "emp_stderr": float(self.emp_stderr[i]),
                "se_sigma2": float(self.se_sigma2[i]),
                "rel_gap_se": float(self.rel_gap_se[i]),
            }
            if self.gfa_mse is not None:
                row.update(
                    gfa_mse=float(self.gfa_mse[i]),
                    gfa_stderr=float(self.gfa_stderr[i]),
                    rel_gap_gfa=float(self.rel_gap_gfa[i]),
                )
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash,
            "metadata": {
                "package": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "wall_time": self.wall_time,
                "timestamp": self.timestamp,
            },
            "trial_seeds": self.trial_seeds,
            "failed_trials": self.failed_trials,
            "rows": self.rows(),
            "thresholds": self.threshold_results(),
            "order_parameters": None if self.order_parameters is None else self.order_parameters.to_dict(),
        }

    def write(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        tag = self.config.hash
        (out / f"comparison_{tag}.csv").write_text(self.csv_text())
        (out / f"report_{tag}.json").write_text(json.dumps(self.to_dict(), indent=1, allow_nan=True))
        manifest = out / f"failed_trials_{tag}.json"
        if self.failed_trials:
            manifest.write_text(json.dumps(self.failed_trials, indent=1))
        elif manifest.exists():
            manifest.unlink()
        return out


# ---------------------------------------------------------------------------
# orchestration


def _schedule(cfg: ExperimentConfig):
    """The SE trace and the fixed denoiser schedule applied in every trial."""
    prior, rule = cfg.prior, cfg.rule
    factory = make_factory(cfg.schedule_name, prior, cfg.kappa, cfg.scale_arg, rule)
    se = se_run(prior, cfg.delta, cfg.sigma0_2, factory, cfg.T, rule)
    if cfg.tau_source == "gfa":
        op = gfa_run(prior, cfg.delta, cfg.sigma0_2, factory, cfg.T, cfg.mc_samples, cfg.seed,
                     cfg.gfa_replicas, cfg.workers)
        return se, list(op.denoisers), op
    return se, list(se.denoisers), None


def _run_trial(cfg: ExperimentConfig, seed: int, etas):
    inst = generate_instance(cfg.n, cfg.delta, cfg.sigma0_2, cfg.prior, seed)
    if cfg.algorithm == "amp":
        return run_amp(inst, etas, cfg.T)
    if cfg.algorithm == "oamp" and cfg.tau_source == "empirical":
        base_name = cfg.schedule_name[3:-1]
        base = make_factory(base_name, cfg.prior, cfg.kappa)
        return run_oamp(inst, base, cfg.prior, cfg.T, "empirical", cfg.scale_arg, cfg.rule)
    return run_ist(inst, etas, cfg.T)


def run_experiment(config: ExperimentConfig, write: bool = True) -> ComparisonReport:
    """Run ``trials`` finite-N trajectories plus one SE and one GFA prediction.

    Trial ``i`` uses ``trial_seed(config.seed, i)``.  Failing trials are
    recorded with their seed and excluded from the averages.  AMP has no GFA
    prediction (the order-parameter recursion describes the matched-filter
    iteration without Onsager term), so it is skipped for ``algorithm=amp``.
    """
    t_start = time.perf_counter()
    cfg = config
    se, etas, op = _schedule(cfg)
    seeds = [trial_seed(cfg.seed, i) for i in range(cfg.trials)]

    def job(item):
        i, seed = item
        try:
            return _run_trial(cfg, seed, etas), None
        except (DivergenceError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return None, {"trial": i, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(job, enumerate(seeds)))
    else:
        results = [job(item) for item in enumerate(seeds)]
    trajectories = [r for r, _ in results if r is not None]
    failed = [f for _, f in results if f is not None]

    n_t = cfg.T + 1
    if trajectories:
        mses = np.stack([tr.mse for tr in trajectories])
        emp = mses.mean(0)
        emp_se = mses.std(0, ddof=1) / math.sqrt(len(mses)) if len(mses) > 1 else np.full(n_t, np.nan)
    else:
        emp = emp_se = np.full(n_t, np.nan)
    emp_tau2 = None
    if trajectories and trajectories[0].tau2 is not None and cfg.tau_source == "empirical":
        emp_tau2 = np.append(np.stack([tr.tau2 for tr in trajectories]).mean(0), np.nan)

    gfa_mse = gfa_se = gfa_tau2 = None
    if not cfg.skip_gfa and cfg.algorithm != "amp" and cfg.tau_source != "empirical":
        if op is None:
            op = gfa_run(cfg.prior, cfg.delta, cfg.sigma0_2, etas, cfg.T, cfg.mc_samples, cfg.seed,
                         cfg.gfa_replicas, cfg.workers)
        gfa_mse, gfa_se, gfa_tau2 = op.mse, op.mse_se, np.diag(op.R)
    elif cfg.skip_gfa or cfg.algorithm == "amp":
        op = None

    report = ComparisonReport(
        config=cfg,
        t=np.arange(n_t),
        emp_mse=emp,
        emp_stderr=emp_se,
        emp_tau2=emp_tau2,
        se_sigma2=se.sigma2,
        se_tau2=se.tau2,
        gfa_mse=gfa_mse,
        gfa_stderr=gfa_se,
        gfa_tau2=gfa_tau2,
        trial_seeds=seeds,
        failed_trials=failed,
        order_parameters=op,
        wall_time=time.perf_counter() - t_start,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    if write:
        report.write(cfg.output_dir)
    return report


def sweep(config: ExperimentConfig, axis: str, values: Sequence[float], write: bool = True):
    """One experiment per value of ``axis``; point ``i`` uses ``point_seed(config.seed, i)``.

    Returns ``(reports, summary_rows)``.  A failing point yields ``None`` in
    ``reports`` and an error entry in the summary, without stopping the sweep.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError("axis", f"must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    reports, summary = [], []
    root = Path(config.output_dir)
    for i, value in enumerate(values):
        seed = point_seed(config.seed, i)
        row = {"index": i, "axis": axis, "value": float(value), "seed": seed}
        try:
            cfg = dataclasses.replace(config, **{axis: float(value)}, seed=seed,
                                      output_dir=str(root / f"{axis}={value}"))
            rep = run_experiment(cfg, write=write)
        except Exception as exc:  # isolate the point, keep sweeping
            reports.append(None)
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        else:
            reports.append(rep)
            row.update(
                status="ok" if rep.passed() else "threshold_failed",
                config_hash=cfg.hash,
                emp_final=float(rep.emp_mse[-1]),
                se_final=float(rep.se_sigma2[-1]),
                gfa_final=None if rep.gfa_mse is None else float(rep.gfa_mse[-1]),
            )
        summary.append(row)
    if write:
        root.mkdir(parents=True, exist_ok=True)
        cols = ["index", "axis", "value", "seed", "status", "config_hash", "emp_final", "se_final", "gfa_final", "error"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, cols, lineterminator="\n", restval="")
        w.writeheader()
        for row in summary:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
        (root / f"sweep_{axis}_{config.hash}.csv").write_text(buf.getvalue())
    return reports, summary
