"""Obfuscation-key generation and condition-number measurement.

Three generators, all float64 and fully deterministic per (seed, key_index):

* random_orthogonal: Q factor of a seeded Gaussian matrix. Condition number 1,
  inverse is the transpose (error-free), the method's default.
* random_prescribed_kappa: Q_a S Q_b with the singular spectrum chosen to hit
  a target condition number exactly; inverse is Q_b^T S^-1 Q_a^T.
* random_raw: plain Gaussian matrix inverted numerically (Gauss-Jordan with
  partial pivoting) -- the naive baseline whose conditioning is whatever it is.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, SingularMatrix
from .numerics import matmul, qr_decompose, require_square, singular_extremes
from .rng import substream

SIGMA_MAX_RANGE = (0.5, 2.0)  # keeps obfuscated activations near unit scale
RAW_PIVOT_REL_TOL = 1e-12  # relative to the Frobenius norm of the draw
RAW_MAX_REDRAWS = 16


class KeyKind(enum.Enum):
    ORTHOGONAL = "orthogonal"
    PRESCRIBED_KAPPA = "prescribed_kappa"
    RAW_RANDOM = "raw_random"


@dataclass(frozen=True)
class SingularSpectrum:
    sigma_max: float
    sigma_min: float
    interior: np.ndarray

    def values(self) -> np.ndarray:
        return np.concatenate(([self.sigma_max], self.interior, [self.sigma_min]))


@dataclass(frozen=True)
class ObfuscationKey:
    r: np.ndarray        # n x n float64
    r_inv: np.ndarray    # n x n float64
    kind: KeyKind
    target_kappa: float | None
    measured_kappa: float
    seed: int
    key_index: int = 0
    redraws: int = 0     # raw keys only: singular draws skipped

    @property
    def n(self) -> int:
        return self.r.shape[0]

    def cast(self, dtype):
        """Run-precision copies of (r, r_inv); transpose/inverse structure survives the cast."""
        return self.r.astype(dtype), self.r_inv.astype(dtype)


def _gaussian(n: int, seed: int, key_index: int, *extra) -> np.ndarray:
    g = substream(seed, "key", key_index, *extra)
    return g.standard_normal((n, n))


def random_orthogonal(n: int, seed: int, key_index: int = 0) -> ObfuscationKey:
    if n < 1:
        raise ShapeMismatch(f"key size must be >= 1, got {n}")
    q, _ = qr_decompose(_gaussian(n, seed, key_index))
    smax, smin = singular_extremes(q)
    return ObfuscationKey(
        r=q,
        r_inv=q.T.copy(),
        kind=KeyKind.ORTHOGONAL,
        target_kappa=None,
        measured_kappa=smax / smin,
        seed=seed,
        key_index=key_index,
    )


def random_prescribed_kappa(n: int, kappa: float, seed: int, key_index: int = 0) -> ObfuscationKey:
    if not (math.isfinite(kappa) and kappa >= 1.0):
        raise ValueError(f"target condition number must be finite and >= 1, got {kappa}")
    if n < 2 and kappa > 1.0:
        raise ShapeMismatch("a 1x1 matrix always has condition number 1; need n >= 2")
    g = substream(seed, "key", key_index)
    q_a, _ = qr_decompose(g.standard_normal((n, n)))
    q_b, _ = qr_decompose(g.standard_normal((n, n)))
    sigma_max = float(g.uniform(*SIGMA_MAX_RANGE))
    sigma_min = sigma_max / kappa
    interior = np.sort(g.uniform(sigma_min, sigma_max, size=max(n - 2, 0)))[::-1]
    spectrum = SingularSpectrum(sigma_max, sigma_min, interior)
    sv = spectrum.values()[:n]  # n == 1 keeps just sigma_max
    r = matmul(q_a, sv[:, None] * q_b)
    r_inv = matmul(q_b.T.copy() * (1.0 / sv)[None, :], q_a.T.copy())
    smax, smin = singular_extremes(r)
    return ObfuscationKey(
        r=r,
        r_inv=r_inv,
        kind=KeyKind.PRESCRIBED_KAPPA,
        target_kappa=float(kappa),
        measured_kappa=smax / smin if smin > 0 else math.inf,
        seed=seed,
        key_index=key_index,
    )


def gauss_jordan_inverse(a: np.ndarray, pivot_rel_tol: float = RAW_PIVOT_REL_TOL) -> np.ndarray:
    """Gauss-Jordan inversion with partial pivoting; rejects near-singular input."""
    a = require_square(np.asarray(a, dtype=np.float64))
    n = a.shape[0]
    tol = pivot_rel_tol * float(np.linalg.norm(a))
    aug = np.concatenate([a.copy(), np.eye(n)], axis=1)
    for col in range(n):
        p = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[p, col]) <= tol:
            raise SingularMatrix(f"pivot {aug[p, col]:.3e} below threshold {tol:.3e} at column {col}")
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        aug[col] /= aug[col, col]
        rows = np.arange(n) != col
        aug[rows] -= aug[rows, col][:, None] * aug[col]
    return np.ascontiguousarray(aug[:, n:])


def random_raw(n: int, seed: int, key_index: int = 0) -> ObfuscationKey:
    if n < 1:
        raise ShapeMismatch(f"key size must be >= 1, got {n}")
    for attempt in range(RAW_MAX_REDRAWS):
        draw = _gaussian(n, seed, key_index, "attempt", attempt) if attempt else _gaussian(n, seed, key_index)
        try:
            r_inv = gauss_jordan_inverse(draw)
        except SingularMatrix:
            continue
        smax, smin = singular_extremes(draw)
        return ObfuscationKey(
            r=draw,
            r_inv=r_inv,
            kind=KeyKind.RAW_RANDOM,
            target_kappa=None,
            measured_kappa=smax / smin if smin > 0 else math.inf,
            seed=seed,
            key_index=key_index,
            redraws=attempt,
        )
    raise SingularMatrix(f"no invertible draw in {RAW_MAX_REDRAWS} attempts (n={n}, seed={seed})")


def condition_number(a: np.ndarray) -> float:
    """sigma_max / sigma_min; +inf for (numerically) singular matrices."""
    require_square(np.asarray(a))
    smax, smin = singular_extremes(a)
    if smin == 0.0:
        return math.inf
    return smax / smin


def identity_key(n: int) -> ObfuscationKey:
    """Identity obfuscation (pass-through); used by tests and debugging."""
    eye = np.eye(n, dtype=np.float64)
    return ObfuscationKey(
        r=eye,
        r_inv=eye.copy(),
        kind=KeyKind.ORTHOGONAL,
        target_kappa=1.0,
        measured_kappa=1.0,
        seed=0,
        key_index=-1,
    )


def make_key(kind: KeyKind, n: int, seed: int, key_index: int = 0, kappa: float | None = None) -> ObfuscationKey:
    if kind is KeyKind.ORTHOGONAL:
        return random_orthogonal(n, seed, key_index)
    if kind is KeyKind.PRESCRIBED_KAPPA:
        if kappa is None:
            raise ValueError("prescribed-kappa keys need a target kappa")
        return random_prescribed_kappa(n, kappa, seed, key_index)
    if kind is KeyKind.RAW_RANDOM:
        return random_raw(n, seed, key_index)
    raise ValueError(f"unknown key kind {kind!r}")
