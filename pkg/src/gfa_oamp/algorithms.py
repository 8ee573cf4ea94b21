"""Finite-N iterations: IST, AMP and OAMP with the matched filter W = A^T.

All three start from x^(0) = 0 and log statistics before each update, so a run
of T updates yields T + 1 records (index 0 is the initial guess).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .denoisers import Denoiser, Factory, Prior, QuadratureRule, ScaleArg, df_factory
from .linear_model import ProblemInstance
from .state_evolution import se_run

__all__ = [
    "DivergenceError",
    "TrajectoryRecord",
    "run_ist",
    "run_amp",
    "run_oamp",
    "oamp_tau_schedule",
    "error_recursion_view",
]

# abort when mse exceeds this multiple of the initial mse
DIVERGENCE_FACTOR = 1e3


class DivergenceError(RuntimeError):
    def __init__(self, algorithm: str, t: int, reason: str):
        super().__init__(f"{algorithm} diverged at iteration {t}: {reason}")
        self.algorithm = algorithm
        self.t = t


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    algorithm: str
    mse: np.ndarray
    overlap: np.ndarray
    second_moment: np.ndarray
    signal_power: float
    onsager: Optional[np.ndarray] = None
    tau2: Optional[np.ndarray] = None
    denoisers: tuple = field(default=(), repr=False)

    @property
    def T(self) -> int:
        return len(self.mse) - 1

    def decomposition_gap(self) -> np.ndarray:
        """mse - (|x0|^2/N - 2 overlap + second_moment), zero up to rounding."""
        return self.mse - (self.signal_power - 2.0 * self.overlap + self.second_moment)


Schedule = Union[Denoiser, Sequence[Denoiser]]


def _schedule(denoisers: Schedule, T: int) -> list[Denoiser]:
    if isinstance(denoisers, Denoiser):
        return [denoisers] * T
    etas = list(denoisers)
    if len(etas) < T:
        raise ValueError(f"schedule has {len(etas)} denoisers, need {T}")
    return etas[:T]


class _Recorder:
    def __init__(self, algorithm: str, x0: np.ndarray):
        self.algorithm = algorithm
        self.x0 = x0
        self.n = x0.size
        self.signal_power = float(x0 @ x0) / self.n
        self.mse, self.overlap, self.c = [], [], []

    def log(self, t: int, x: np.ndarray):
        if not np.all(np.isfinite(x)):
            raise DivergenceError(self.algorithm, t, "non-finite iterate")
        err = self.x0 - x
        mse = float(err @ err) / self.n
        if t > 0 and self.mse[0] > 0 and mse > DIVERGENCE_FACTOR * self.mse[0]:
            raise DivergenceError(self.algorithm, t, f"mse {mse:.3e} exceeds {DIVERGENCE_FACTOR:g} x initial")
        self.mse.append(mse)
        self.overlap.append(float(x @ self.x0) / self.n)
        self.c.append(float(x @ x) / self.n)

    def record(self, **extra) -> TrajectoryRecord:
        return TrajectoryRecord(
            algorithm=self.algorithm,
            mse=np.array(self.mse),
            overlap=np.array(self.overlap),
            second_moment=np.array(self.c),
            signal_power=self.signal_power,
            **extra,
        )


def _matched_filter_run(name: str, inst: ProblemInstance, etas: list[Denoiser], **extra) -> TrajectoryRecord:
    A, y = inst.A, inst.y
    x = np.zeros(inst.N)
    rec = _Recorder(name, inst.x0)
    rec.log(0, x)
    for t, eta in enumerate(etas):
        z = y - A @ x
        x = eta(A.T @ z + x)
        rec.log(t + 1, x)
    return rec.record(denoisers=tuple(etas), **extra)


def run_ist(inst: ProblemInstance, denoisers: Schedule, T: int) -> TrajectoryRecord:
    """x^(t+1) = eta_t(A^T (y - A x^(t)) + x^(t))."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    return _matched_filter_run("IST", inst, _schedule(denoisers, T))


def run_amp(inst: ProblemInstance, denoisers: Schedule, T: int) -> TrajectoryRecord:
    """AMP with the Onsager term (z^(t-1)/delta) <eta'_{t-1}(A^T z^(t-1) + x^(t-1))>.

    z^(0) = y carries no correction; ``onsager[t]`` is the average derivative
    used when forming z^(t+1).
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    etas = _schedule(denoisers, T)
    A, y, delta = inst.A, inst.y, inst.delta
    x = np.zeros(inst.N)
    z = y.copy()
    rec = _Recorder("AMP", inst.x0)
    rec.log(0, x)
    onsager = []
    for t, eta in enumerate(etas):
        u = A.T @ z + x
        x = eta(u)
        b = float(np.mean(eta.derivative(u)))
        onsager.append(b)
        z = y - A @ x + z * (b / delta)
        rec.log(t + 1, x)
    return rec.record(onsager=np.array(onsager), denoisers=tuple(etas))


def oamp_tau_schedule(
    source: str,
    base: Factory,
    prior: Prior,
    delta: float,
    sigma0_2: float,
    T: int,
    scale: ScaleArg = "normalized",
    rule: QuadratureRule | None = None,
    mc_samples: int = 200_000,
    seed: int = 0,
) -> np.ndarray:
    """Predicted tau_t (t < T) from state evolution (``"se"``) or the GFA engine (``"gfa"``)."""
    factory = df_factory(base, prior, scale, rule)
    if source == "se":
        return np.sqrt(se_run(prior, delta, sigma0_2, factory, T, rule).tau2[:T])
    if source == "gfa":
        from .gfa import gfa_run

        op = gfa_run(prior, delta, sigma0_2, factory, T, mc_samples, seed)
        return np.sqrt(np.diag(op.R)[:T])
    raise ValueError(f"unknown tau source {source!r}")


def run_oamp(
    inst: ProblemInstance,
    base: Factory,
    prior: Prior,
    T: int,
    tau_source: Union[str, Sequence[float]] = "se",
    scale: ScaleArg = "normalized",
    rule: QuadratureRule | None = None,
) -> TrajectoryRecord:
    """OAMP with W = A^T: x^(t+1) = eta_t(A^T z^(t) + x^(t)), z^(t) = y - A x^(t).

    ``eta_t`` is ``base(tau_t)`` made divergence-free at ``tau_t``.  The tau_t
    come from state evolution (``"se"``), the GFA engine (``"gfa"``), an
    explicit sequence, or ``"empirical"``: tau_t^2 = |z^(t)|^2 / M.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    factory = df_factory(base, prior, scale, rule)
    if isinstance(tau_source, str) and tau_source == "empirical":
        return _oamp_empirical(inst, factory, T)
    if isinstance(tau_source, str):
        taus = oamp_tau_schedule(tau_source, base, prior, inst.delta, inst.sigma0_2, T, scale, rule)
    else:
        taus = np.asarray(tau_source, dtype=float)[:T]
        if len(taus) < T:
            raise ValueError(f"tau schedule has {len(taus)} entries, need {T}")
    etas = [factory(float(tau)) for tau in taus]
    return _matched_filter_run("OAMP", inst, etas, tau2=np.asarray(taus) ** 2)


def _oamp_empirical(inst: ProblemInstance, factory: Callable[[float], Denoiser], T: int) -> TrajectoryRecord:
    A, y = inst.A, inst.y
    x = np.zeros(inst.N)
    rec = _Recorder("OAMP", inst.x0)
    rec.log(0, x)
    etas, tau2 = [], []
    for t in range(T):
        z = y - A @ x
        t2 = float(z @ z) / inst.M
        eta = factory(math.sqrt(t2))
        x = eta(A.T @ z + x)
        etas.append(eta)
        tau2.append(t2)
        rec.log(t + 1, x)
    return rec.record(tau2=np.array(tau2), denoisers=tuple(etas))


def error_recursion_view(inst: ProblemInstance, trajectory: TrajectoryRecord):
    """Replay h^(t) = (I - A^T A) q^(t) + A^T omega, q^(t+1) = eta_t(x0 + h^(t)) - x0.

    Returns per-component squared norms ``(h_norm2, q_norm2)`` with lengths T
    and T + 1; ``q_norm2`` reproduces the trajectory mse.
    """
    if trajectory.algorithm == "AMP":
        raise ValueError("the error recursion describes W = A^T iterations without Onsager term")
    A, x0 = inst.A, inst.x0
    noise = A.T @ inst.omega
    q = -x0.copy()
    n = inst.N
    h_norm2, q_norm2 = [], [float(q @ q) / n]
    for eta in trajectory.denoisers:
        h = q - A.T @ (A @ q) + noise
        q = eta(x0 + h) - x0
        h_norm2.append(float(h @ h) / n)
        q_norm2.append(float(q @ q) / n)
    return np.array(h_norm2), np.array(q_norm2)
