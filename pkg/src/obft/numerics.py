"""Dense real-matrix arithmetic and the nonlinear transformer kernels.

Matrices are 2-D C-contiguous numpy arrays in one of two working precisions
(float32 for model execution, float64 for generation and verification). The
matrix product has a pinned per-element summation order (ascending k) so that
protected and unprotected floating-point trajectories are comparable; see
backend.py for the compiled/fallback kernel pair.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from . import backend
from .errors import NonFiniteValues, ShapeMismatch
from .rng import substream


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self):
        return np.float32 if self is Precision.F32 else np.float64

    @property
    def itemsize(self) -> int:
        return 4 if self is Precision.F32 else 8

    @classmethod
    def parse(cls, text: str) -> "Precision":
        text = text.strip().lower()
        for p in cls:
            if p.value == text:
                return p
        raise ValueError(f"unknown precision {text!r} (expected f32 or f64)")


_DTYPES = (np.float32, np.float64)

# Start vector for the iterative singular-value estimators; fixed so repeated
# measurements of the same matrix agree bit for bit.
_PROBE_SEED = 0x0B5E


def as_matrix(a, dtype=None) -> np.ndarray:
    """Validate/coerce to a 2-D C-contiguous float32/float64 array."""
    arr = np.asarray(a, dtype=dtype)
    if arr.dtype not in _DTYPES:
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def require_finite(arr: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteValues(f"{what} contains non-finite entries")
    return arr


def require_square(arr: np.ndarray, what: str = "matrix") -> np.ndarray:
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeMismatch(f"{what} must be square, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with pinned ascending-k accumulation per output element."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) x ({b.shape[0]}x{b.shape[1]})"
        )
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    backend.matmul_into(a, b, out)
    return out


def qr_decompose(a: np.ndarray):
    """Householder QR of a square matrix: a = q @ r, q orthogonal, r upper triangular."""
    a = require_square(np.asarray(a))
    require_finite(a, "qr input")
    n = a.shape[0]
    r = np.array(a, dtype=a.dtype, copy=True)
    q = np.eye(n, dtype=a.dtype)
    for k in range(n):
        x = r[k:, k]
        norm_x = math.sqrt(float(np.dot(x, x)))
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(norm_x, x[0])
        vtv = float(np.dot(v, v))
        if vtv == 0.0:
            continue
        w = 2.0 / vtv
        r[k:, k:] -= (w * v)[:, None] * (v @ r[k:, k:])[None, :]
        r[k + 1 :, k] = 0.0
        q[:, k:] -= (q[:, k:] @ v)[:, None] * (w * v)[None, :]
    return q, r


def _cholesky_lower(b: np.ndarray, rel_tol: float):
    """Lower Cholesky factor of symmetric b, or None if a pivot drops below
    rel_tol times the largest diagonal entry (numerically semi-definite)."""
    n = b.shape[0]
    low = np.zeros_like(b)
    floor = rel_tol * max(float(np.max(np.diag(b))), 0.0)
    for j in range(n):
        pivot = b[j, j] - float(np.dot(low[j, :j], low[j, :j]))
        if pivot <= floor:
            return None
        ljj = math.sqrt(pivot)
        low[j, j] = ljj
        if j + 1 < n:
            low[j + 1 :, j] = (b[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / ljj
    return low


def _cholesky_inverse(low: np.ndarray) -> np.ndarray:
    """(L L^T)^-1 from the lower factor via two triangular solves against I."""
    n = low.shape[0]
    y = np.eye(n)
    for i in range(n):
        y[i] = (y[i] - low[i, :i] @ y[:i]) / low[i, i]
    z = y
    for i in range(n - 1, -1, -1):
        z[i] = (z[i] - low[i + 1 :, i] @ z[i + 1 :]) / low[i, i]
    return z


def singular_extremes(a: np.ndarray, max_iter: int = 20000, tol: float = 1e-13):
    """Largest and smallest singular value of a square matrix.

    sigma_max via power iteration on a^T a; sigma_min via inverse iteration
    with a Cholesky solve of a^T a. A numerically semi-definite a^T a (pivot
    underflow) reports sigma_min = 0.0, the singular/infinite-kappa case.
    Computed in float64 regardless of input precision.
    """
    a = require_square(np.asarray(a))
    require_finite(a, "singular_extremes input")
    n = a.shape[0]
    a64 = a.astype(np.float64, copy=False)
    if n == 1:
        s = abs(float(a64[0, 0]))
        return s, s
    b = a64.T @ a64
    x = substream(_PROBE_SEED, "sigma-probe").standard_normal(n)
    x /= np.linalg.norm(x)

    lam = 0.0
    for _ in range(max_iter):
        y = b @ x
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            lam = 0.0
            break
        x_new = y / ny
        lam_new = float(x_new @ (b @ x_new))
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        x, lam = x_new, lam_new
    sigma_max = math.sqrt(max(lam, 0.0))

    low = _cholesky_lower(b, rel_tol=n * np.finfo(np.float64).eps)
    if low is None:
        return sigma_max, 0.0
    b_inv = _cholesky_inverse(low)
    x = substream(_PROBE_SEED, "sigma-probe").standard_normal(n)
    x /= np.linalg.norm(x)
    mu = 0.0
    for _ in range(max_iter):
        z = b_inv @ x
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            break
        x_new = z / nz
        mu_new = float(x_new @ (b @ x_new))
        if mu != 0.0 and abs(mu_new - mu) <= tol * abs(mu_new):
            mu = mu_new
            break
        x, mu = x_new, mu_new
    sigma_min = math.sqrt(max(mu, 0.0))
    return sigma_max, sigma_min


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


def gelu(a: np.ndarray) -> np.ndarray:
    """tanh-approximation gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    dt = a.dtype
    inner = dt.type(_GELU_C0) * (a + dt.type(_GELU_C1) * a * a * a)
    return dt.type(0.5) * a * (dt.type(1.0) + np.tanh(inner))


def gelu_grad(a: np.ndarray) -> np.ndarray:
    dt = a.dtype
    inner = dt.type(_GELU_C0) * (a + dt.type(_GELU_C1) * a * a * a)
    t = np.tanh(inner)
    d_inner = dt.type(_GELU_C0) * (dt.type(1.0) + dt.type(3.0 * _GELU_C1) * a * a)
    return dt.type(0.5) * (dt.type(1.0) + t) + dt.type(0.5) * a * (dt.type(1.0) - t * t) * d_inner


def layernorm(a: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Normalize each row to zero mean / unit variance, then apply the affine."""
    dt = a.dtype
    mean = np.mean(a, axis=-1, keepdims=True)
    centered = a - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = dt.type(1.0) / np.sqrt(var + dt.type(eps))
    normed = centered * inv_std
    return normed * gain + bias


def layernorm_with_tape(a: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    dt = a.dtype
    mean = np.mean(a, axis=-1, keepdims=True)
    centered = a - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = dt.type(1.0) / np.sqrt(var + dt.type(eps))
    normed = centered * inv_std
    return normed * gain + bias, (normed, inv_std, gain)


def layernorm_backward(d_out: np.ndarray, tape) -> np.ndarray:
    """Gradient w.r.t. the layernorm input (gain/bias are frozen here)."""
    normed, inv_std, gain = tape
    g = d_out * gain
    term = g - np.mean(g, axis=-1, keepdims=True) - normed * np.mean(g * normed, axis=-1, keepdims=True)
    return term * inv_std
