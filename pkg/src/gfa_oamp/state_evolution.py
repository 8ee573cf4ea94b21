"""Scalar state evolution: tau_t^2 = sigma0^2 + sigma_t^2/delta and
sigma_{t+1}^2 = E[(x0 - eta_t(x0 + tau_t z))^2]."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoisers import Denoiser, Factory, Prior, QuadratureRule, joint_expectation, second_moment

__all__ = ["SeTrace", "se_step", "se_run", "se_fixed_point", "squared_error"]


@dataclass(frozen=True, eq=False)
class SeTrace:
    sigma2: np.ndarray
    tau2: np.ndarray
    delta: float
    sigma0_2: float
    denoisers: tuple = field(default=(), repr=False)

    @property
    def T(self) -> int:
        return len(self.sigma2) - 1

    @property
    def tau(self) -> np.ndarray:
        return np.sqrt(self.tau2)

    def csv_rows(self):
        """Rows in the harness schema ``t,source,mse,stderr,tau2,extra``."""
        for t, (s2, t2) in enumerate(zip(self.sigma2, self.tau2)):
            yield {"t": t, "source": "SE", "mse": s2, "stderr": 0.0, "tau2": t2, "extra": ""}


def squared_error(eta: Denoiser, prior: Prior, tau: float, rule: QuadratureRule | None = None) -> float:
    """E[(x0 - eta(x0 + tau z))^2]."""
    return joint_expectation(lambda x0, u: (x0 - eta(u)) ** 2, prior, tau, rule, eta.breakpoints)


def se_step(
    sigma2_t: float,
    delta: float,
    sigma0_2: float,
    prior: Prior,
    factory: Factory,
    rule: QuadratureRule | None = None,
):
    """One recursion step; returns ``(sigma2_next, tau2_t, eta_t)``."""
    if sigma2_t < 0:
        raise ValueError(f"sigma2 must be nonnegative, got {sigma2_t}")
    tau2 = sigma0_2 + sigma2_t / delta
    eta = factory(math.sqrt(tau2))
    return squared_error(eta, prior, math.sqrt(tau2), rule), tau2, eta


def se_run(
    prior: Prior,
    delta: float,
    sigma0_2: float,
    factory: Factory,
    T: int,
    rule: QuadratureRule | None = None,
) -> SeTrace:
    sigma2 = [second_moment(prior)]
    tau2, etas = [], []
    for _ in range(T):
        nxt, t2, eta = se_step(sigma2[-1], delta, sigma0_2, prior, factory, rule)
        sigma2.append(nxt)
        tau2.append(t2)
        etas.append(eta)
    tau2.append(sigma0_2 + sigma2[-1] / delta)
    return SeTrace(np.array(sigma2), np.array(tau2), delta, sigma0_2, tuple(etas))


def se_fixed_point(
    prior: Prior,
    delta: float,
    sigma0_2: float,
    factory: Factory,
    tol: float = 1e-12,
    max_iter: int = 10_000,
    rule: QuadratureRule | None = None,
):
    """Iterate to a fixed point; returns ``(sigma2_star, iterations, converged)``.

    Stops when ``|d sigma2| < tol * max(sigma2, 1)``.  Blow-up or ``max_iter``
    yields ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    sigma2 = second_moment(prior)
    for it in range(1, max_iter + 1):
        nxt, _, _ = se_step(sigma2, delta, sigma0_2, prior, factory, rule)
        if not math.isfinite(nxt) or nxt > 1e200:
            return nxt, it, False
        if abs(nxt - sigma2) < tol * max(sigma2, 1.0):
            return nxt, it, True
        sigma2 = nxt
    return sigma2, max_iter, False
