"""Signal prior, scalar denoisers and Gaussian-channel expectations.

Every theory module evaluates averages of the form ``E[f(x0 + tau*z)]`` with
``x0`` drawn from a Bernoulli-Gaussian prior and ``z ~ N(0, 1)``.  Conditioning
on the channel output ``u = x0 + tau*z`` turns each mixture component into a
centred Gaussian in ``u`` and a Gaussian in ``x0 | u``.  The inner factor is
always Gauss-Hermite.  The outer factor is Gauss-Hermite for plain smooth
integrands (``breakpoints=None``); passing a breakpoint tuple, even an empty
one, switches to Gauss-Legendre on the half-lines split at 0 and at every
breakpoint.  Denoiser integrands always take the piecewise path: kinks need
it, and the logistic responsibility of the MMSE denoiser converges far faster
there than under a single Hermite rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import expit

__all__ = [
    "Prior",
    "QuadratureRule",
    "QuadratureError",
    "SingularNormalizationError",
    "Denoiser",
    "SoftThreshold",
    "MmseBG",
    "Linear",
    "DivergenceFree",
    "second_moment",
    "gaussian_expectation",
    "joint_expectation",
    "df_transform",
    "check_divergence_free",
    "mmse_denoiser_bg",
    "soft_factory",
    "mmse_factory",
    "df_factory",
    "make_factory",
    "default_rule",
]


class QuadratureError(ValueError):
    """An integrand returned a non-finite value at a quadrature node."""


class SingularNormalizationError(ZeroDivisionError):
    """The variance-normalising scale 1/(1 - alpha) is numerically singular."""


@dataclass(frozen=True)
class Prior:
    """Bernoulli-Gaussian prior ``(1-eps) delta_0 + eps N(0, amp_variance)``."""

    epsilon: float
    amp_variance: float = 1.0
    kind: str = "BernoulliGaussian"

    def __post_init__(self):
        if self.kind != "BernoulliGaussian":
            raise ValueError(f"unsupported prior kind {self.kind!r}")
        # epsilon = 0 (all-zero signal) is admitted for degenerate checks.
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.amp_variance < 0.0:
            raise ValueError(f"amp_variance must be >= 0, got {self.amp_variance}")

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        active = rng.random(size) < self.epsilon
        slab = rng.standard_normal(size) * math.sqrt(self.amp_variance)
        return np.where(active, slab, 0.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "amp_variance": self.amp_variance}


def second_moment(prior: Prior) -> float:
    return prior.epsilon * prior.amp_variance


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule normalised to the standard normal measure.

    ``nodes``/``weights`` integrate against N(0, 1); ``legendre_*`` are the
    same-order Gauss-Legendre rule on [-1, 1] used for piecewise integrals.
    """

    order: int = 61
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)
    legendre_nodes: np.ndarray = field(init=False, repr=False, compare=False)
    legendre_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("quadrature order must be positive")
        x, w = np.polynomial.hermite_e.hermegauss(self.order)
        w = w / w.sum()
        gx, gw = np.polynomial.legendre.leggauss(self.order)
        for name, arr in (("nodes", x), ("weights", w), ("legendre_nodes", gx), ("legendre_weights", gw)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@lru_cache(maxsize=16)
def default_rule(order: int = 61) -> QuadratureRule:
    return QuadratureRule(order)


# Tail cut for piecewise integration: phi(b)/phi(a) = exp(-40) beyond b.
_TAIL = 80.0


def _outer_nodes(scale: float, breakpoints: Sequence[float] | None, rule: QuadratureRule):
    """Nodes and weights for E[g(scale * w)], w ~ N(0, 1)."""
    if scale == 0.0:
        return np.zeros(1), np.ones(1)
    if breakpoints is None:
        return scale * rule.nodes, rule.weights
    cuts = sorted({0.0, *(b / scale for b in breakpoints)})
    edges = [-math.inf, *cuts, math.inf]
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if a >= 0.0:
            b = min(b, math.sqrt(a * a + _TAIL))
        else:
            a = max(a, -math.sqrt(b * b + _TAIL))
        if b <= a:
            continue
        half = 0.5 * (b - a)
        w = a + half * (rule.legendre_nodes + 1.0)
        xs.append(w)
        ws.append(half * rule.legendre_weights * np.exp(-0.5 * w * w) / math.sqrt(2.0 * math.pi))
    return scale * np.concatenate(xs), np.concatenate(ws)


def _components(prior: Prior, tau: float):
    """Mixture pieces as (weight, sd of u, E[x0|u]/u, sd of x0|u)."""
    t2 = tau * tau
    out = []
    if prior.epsilon < 1.0:
        out.append((1.0 - prior.epsilon, tau, 0.0, 0.0))
    if prior.epsilon > 0.0:
        v = prior.amp_variance
        s2 = v + t2
        gain = v / s2 if s2 > 0 else 0.0
        cond = math.sqrt(v * t2 / s2) if s2 > 0 else 0.0
        out.append((prior.epsilon, math.sqrt(s2), gain, cond))
    return out


def _check_finite(values: np.ndarray, u: np.ndarray):
    bad = ~np.isfinite(values)
    if bad.any():
        idx = np.unravel_index(np.flatnonzero(bad)[0], values.shape)
        node = np.broadcast_to(u, values.shape)[idx]
        raise QuadratureError(f"integrand is not finite at node u={node!r}")


def gaussian_expectation(
    f: Callable[[np.ndarray], np.ndarray],
    prior: Prior,
    tau: float,
    rule: QuadratureRule | None = None,
    breakpoints: Sequence[float] | None = None,
) -> float:
    """E_{x0,z}[f(x0 + tau*z)] for the Bernoulli-Gaussian prior."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    rule = rule or default_rule()
    total = 0.0
    for weight, scale, _, _ in _components(prior, tau):
        u, w = _outer_nodes(scale, breakpoints, rule)
        vals = np.asarray(f(u), dtype=float) * np.ones_like(u)
        _check_finite(vals, u)
        total += weight * float(w @ vals)
    return total


def joint_expectation(
    g: Callable[[np.ndarray, np.ndarray], np.ndarray],
    prior: Prior,
    tau: float,
    rule: QuadratureRule | None = None,
    breakpoints: Sequence[float] | None = None,
) -> float:
    """E_{x0,z}[g(x0, x0 + tau*z)]; ``g`` must be smooth in ``x0``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    rule = rule or default_rule()
    total = 0.0
    for weight, scale, gain, cond in _components(prior, tau):
        u, w = _outer_nodes(scale, breakpoints, rule)
        if cond == 0.0:
            x0 = gain * u[:, None]
            wi = np.ones(1)
        else:
            x0 = gain * u[:, None] + cond * rule.nodes[None, :]
            wi = rule.weights
        vals = np.asarray(g(x0, u[:, None]), dtype=float) * np.ones_like(x0)
        _check_finite(vals, u[:, None])
        total += weight * float(w @ (vals @ wi))
    return total


# ---------------------------------------------------------------------------
# denoisers


class Denoiser:
    """Scalar threshold function applied componentwise, with its derivative."""

    name = "denoiser"
    breakpoints: tuple = ()

    def __call__(self, u):
        raise NotImplementedError

    def derivative(self, u):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class SoftThreshold(Denoiser):
    lam: float
    name = "soft"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"threshold must be positive, got {self.lam}")

    @property
    def breakpoints(self):
        return (-self.lam, self.lam)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.sign(u) * np.maximum(np.abs(u) - self.lam, 0.0)

    def derivative(self, u):
        # 0 at the kinks themselves.
        return (np.abs(np.asarray(u, dtype=float)) > self.lam).astype(float)

    def to_dict(self):
        return {"name": self.name, "lam": self.lam}


def mmse_denoiser_bg(u, prior: Prior, tau2: float, derivative: bool = False):
    """Posterior mean E[x0 | x0 + tau*z = u] (or its u-derivative) for the BG prior."""
    if not tau2 > 0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    u = np.asarray(u, dtype=float)
    eps, v = prior.epsilon, prior.amp_variance
    if eps == 0.0 or v == 0.0:
        return np.zeros_like(u)
    s2 = v + tau2
    gain = v / s2
    if eps == 1.0:
        return np.full_like(u, gain) if derivative else gain * u
    curv = 1.0 / tau2 - 1.0 / s2
    logit = math.log(eps / (1.0 - eps)) + 0.5 * math.log(tau2 / s2) + 0.5 * curv * u * u
    resp = expit(logit)
    if not derivative:
        return resp * gain * u
    return gain * resp * (1.0 + (1.0 - resp) * curv * u * u)


@dataclass(frozen=True)
class MmseBG(Denoiser):
    prior: Prior
    tau2: float
    name = "mmse_bg"

    def __call__(self, u):
        return mmse_denoiser_bg(u, self.prior, self.tau2)

    def derivative(self, u):
        return mmse_denoiser_bg(u, self.prior, self.tau2, derivative=True)

    def to_dict(self):
        return {"name": self.name, "prior": self.prior.to_dict(), "tau2": self.tau2}


@dataclass(frozen=True)
class Linear(Denoiser):
    """``eta(u) = gain * u``; gain 0 is the zero map, gain 1 the identity."""

    gain: float = 1.0
    name = "linear"

    def __call__(self, u):
        return self.gain * np.asarray(u, dtype=float)

    def derivative(self, u):
        return np.full_like(np.asarray(u, dtype=float), self.gain)

    def to_dict(self):
        return {"name": self.name, "gain": self.gain}


@dataclass(frozen=True)
class DivergenceFree(Denoiser):
    """``scale * (base(u) - alpha*u)`` with ``alpha = E[base'(x0 + tau*z)]``."""

    base: Denoiser
    alpha: float
    scale: float
    tau: float

    @property
    def name(self):
        return f"df({self.base.name})"

    @property
    def breakpoints(self):
        return self.base.breakpoints

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.scale * (self.base(u) - self.alpha * u)

    def derivative(self, u):
        return self.scale * (self.base.derivative(u) - self.alpha)

    def to_dict(self):
        return {
            "name": self.name,
            "base": self.base.to_dict(),
            "alpha": self.alpha,
            "scale": self.scale,
            "tau": self.tau,
        }


ScaleArg = Union[float, str]


def df_transform(
    base: Denoiser,
    prior: Prior,
    tau: float,
    scale: ScaleArg = 1.0,
    rule: QuadratureRule | None = None,
    floor: float = 1e-8,
) -> DivergenceFree:
    """Make ``base`` divergence-free at the channel (prior, tau).

    ``scale`` is a number, ``"unit"`` (1) or ``"normalized"`` (1/(1-alpha)).
    """
    alpha = gaussian_expectation(base.derivative, prior, tau, rule, base.breakpoints)
    if scale == "unit":
        scale = 1.0
    elif scale == "normalized":
        if abs(1.0 - alpha) < floor:
            raise SingularNormalizationError(f"|1 - alpha| = {abs(1.0 - alpha):.3e} below floor {floor}")
        scale = 1.0 / (1.0 - alpha)
    elif isinstance(scale, str):
        raise ValueError(f"unknown scale mode {scale!r}")
    return DivergenceFree(base=base, alpha=alpha, scale=float(scale), tau=float(tau))


def check_divergence_free(
    eta: Denoiser, prior: Prior, tau: float, rule: QuadratureRule | None = None
) -> float:
    """Residual E[eta'(x0 + tau*z)]; zero for a divergence-free function."""
    return gaussian_expectation(eta.derivative, prior, tau, rule, eta.breakpoints)


# ---------------------------------------------------------------------------
# factories: tau -> Denoiser, used by the recursions to rebuild eta_t each step

Factory = Callable[[float], Denoiser]


def soft_factory(kappa: float = 1.5) -> Factory:
    def build(tau: float) -> Denoiser:
        return SoftThreshold(kappa * tau)

    return build


def mmse_factory(prior: Prior) -> Factory:
    def build(tau: float) -> Denoiser:
        return MmseBG(prior, tau * tau)

    return build


def df_factory(
    base: Factory, prior: Prior, scale: ScaleArg = "normalized", rule: QuadratureRule | None = None
) -> Factory:
    def build(tau: float) -> Denoiser:
        return df_transform(base(tau), prior, tau, scale, rule)

    return build


def make_factory(
    name: str,
    prior: Prior,
    kappa: float = 1.5,
    scale: ScaleArg = "normalized",
    rule: QuadratureRule | None = None,
) -> Factory:
    """Factory from a config name: soft, mmse_bg, df(soft), df(mmse_bg)."""
    bases = {"soft": lambda: soft_factory(kappa), "mmse_bg": lambda: mmse_factory(prior)}
    if name in bases:
        return bases[name]()
    if name.startswith("df(") and name.endswith(")") and name[3:-1] in bases:
        return df_factory(bases[name[3:-1]](), prior, scale, rule)
    raise ValueError(f"unknown denoiser {name!r}; expected one of soft, mmse_bg, df(soft), df(mmse_bg)")
