"""Random instances of ``y = A x0 + omega`` and the de-correlation check."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoisers import Prior

__all__ = [
    "ProblemInstance",
    "generate_instance",
    "decorrelation_residual",
    "substreams",
    "dump_instance",
    "load_instance",
]

_MAGIC = b"GFAI"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQQd")  # magic, version, M, N, seed, sigma0_2


def substreams(seed: int, n: int, *key: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from ``seed`` (and an optional key path)."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(key))
    return [np.random.default_rng(child) for child in ss.spawn(n)]


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    A: np.ndarray
    x0: np.ndarray
    omega: np.ndarray
    y: np.ndarray
    sigma0_2: float
    seed: int

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.A.shape[1]

    @property
    def delta(self) -> float:
        return self.M / self.N


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def n_measurements(n: int, delta: float) -> int:
    # round half up
    return int(math.floor(delta * n + 0.5))


def generate_instance(n: int, delta: float, sigma0_2: float, prior: Prior, seed: int) -> ProblemInstance:
    """Draw A with i.i.d. N(0, 1/M) entries, x0 from ``prior`` and Gaussian noise.

    Matrix, signal and noise come from separate substreams of ``seed``, so the
    same seed reproduces every component bit for bit.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    if sigma0_2 < 0:
        raise ValueError(f"sigma0_2 must be nonnegative, got {sigma0_2}")
    m = n_measurements(n, delta)
    if n < 1 or m < 1:
        raise ValueError(f"invalid dimensions: n={n}, delta={delta} gives M={m}")
    rng_a, rng_x, rng_w = substreams(seed, 3)
    A = rng_a.standard_normal((m, n)) / math.sqrt(m)
    x0 = prior.sample(n, rng_x)
    omega = rng_w.standard_normal(m) * math.sqrt(sigma0_2)
    y = A @ x0 + omega
    _freeze(A, x0, omega, y)
    return ProblemInstance(A=A, x0=x0, omega=omega, y=y, sigma0_2=float(sigma0_2), seed=int(seed))


def decorrelation_residual(W: np.ndarray, A: np.ndarray) -> float:
    """tr(I - W A) / N for W of shape (N, M) and A of shape (M, N)."""
    W, A = np.asarray(W), np.asarray(A)
    if W.ndim != 2 or A.ndim != 2 or W.shape != A.shape[::-1]:
        raise ValueError(f"shape mismatch: W {W.shape} vs A {A.shape}")
    n = A.shape[1]
    return float(n - np.einsum("ij,ji->", W, A)) / n


def dump_instance(inst: ProblemInstance, path) -> None:
    header = _HEADER.pack(_MAGIC, _VERSION, inst.M, inst.N, inst.seed & 0xFFFFFFFFFFFFFFFF, inst.sigma0_2)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (inst.A, inst.x0, inst.omega, inst.y):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_instance(path) -> ProblemInstance:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: not an instance file (shorter than the header)")
    magic, version, m, n, seed, sigma0_2 = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an instance file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    sizes = (m * n, n, m, m)
    expected = _HEADER.size + 8 * sum(sizes)
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated or oversized payload ({len(raw)} != {expected} bytes)")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    A = parts[0].reshape(m, n)
    x0, omega, y = parts[1], parts[2], parts[3]
    _freeze(A, x0, omega, y)
    return ProblemInstance(A=A, x0=x0, omega=omega, y=y, sigma0_2=sigma0_2, seed=seed)
