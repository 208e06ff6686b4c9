"""Dense float64 linear algebra and the deterministic RNG used by every stage.

All analysis math runs in 64-bit floats. The eigensolver is a cyclic Jacobi
iteration (eigenvalues only), adequate for the small symmetric PSD matrices
this pipeline produces. The RNG is a splitmix-style 64-bit generator with
Box-Muller normals, so value streams are identical across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InvalidInput, InvalidShape

_MASK = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_DERIVE_SALT = 0xD1B54A32D192ED03

# Eigenvalues in (-EIG_NOISE_FLOOR, 0) are numerical noise on PSD inputs and
# are zeroed; genuinely negative eigenvalues pass through unchanged.
EIG_NOISE_FLOOR = 1e-9

JACOBI_MAX_SWEEPS = 100
JACOBI_REL_TOL = 1e-12


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps silently, unlike numpy scalars.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


@dataclass
class Tensor:
    """Dense 2-D float64 matrix with an optional role label.

    The wrapped array is treated as immutable; callers must not mutate it
    after construction. All values are required to be finite.
    """

    values: np.ndarray
    label: str | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if arr.ndim != 2:
            raise InvalidShape(f"Tensor must be 2-D, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidShape(f"Tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInput("Tensor values must be finite")
        self.values = arr

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


class SeededRng:
    """Splitmix-style 64-bit generator; identical seeds give identical streams.

    Single-owner: one consumer at a time. ``derive`` creates an independent
    child stream from the current state without advancing it.
    """

    __slots__ = ("_state", "_spare")

    def __init__(self, seed: int):
        self._state = seed & _MASK
        self._spare: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix64(self._state)

    def uniform(self) -> float:
        """Uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo reduction; bias is negligible
        for the n used here and determinism is what matters."""
        if n <= 0:
            raise InvalidInput(f"randint bound must be positive, got {n}")
        return self.next_u64() % n

    def normals(self, n: int) -> np.ndarray:
        """n standard normal draws via Box-Muller, vectorized.

        Scalar and batched calls consume the identical underlying u64
        stream, so any call pattern with the same total count yields the
        same values.
        """
        if n < 0:
            raise InvalidInput(f"draw count must be >= 0, got {n}")
        out = np.empty(n, dtype=np.float64)
        pos = 0
        if self._spare is not None and n > 0:
            out[0] = self._spare
            self._spare = None
            pos = 1
        remaining = n - pos
        if remaining <= 0:
            return out
        pairs = (remaining + 1) // 2
        idx = np.arange(1, 2 * pairs + 1, dtype=np.uint64)
        states = np.uint64(self._state) + idx * np.uint64(_GAMMA)
        self._state = (self._state + 2 * pairs * _GAMMA) & _MASK
        z = _mix64_vec(states)
        # u1 in (0, 1] so log never sees zero; u2 in [0, 1).
        u1 = ((z[0::2] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0 ** -53
        u2 = (z[1::2] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        interleaved = np.empty(2 * pairs, dtype=np.float64)
        interleaved[0::2] = r * np.cos(theta)
        interleaved[1::2] = r * np.sin(theta)
        out[pos:] = interleaved[:remaining]
        if remaining % 2 == 1:
            self._spare = float(interleaved[remaining])
        return out

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def derive(self, tag: int) -> "SeededRng":
        """Independent child stream keyed by ``tag``; does not advance self."""
        if tag < 0:
            raise InvalidInput(f"derive tag must be >= 0, got {tag}")
        mixed = _mix64((self._state + (tag + 1) * _GAMMA) & _MASK)
        child_seed = _mix64(mixed ^ _DERIVE_SALT)
        return SeededRng(child_seed)


def rng_normal(rng: SeededRng, n: int) -> np.ndarray:
    """Deterministic stream of n standard normal float64 draws."""
    return rng.normals(n)


def gram_matrix(z: Tensor) -> Tensor:
    """Row Gram matrix K = (1/r) Z Z^T, symmetrized exactly.

    K is positive semi-definite for any real Z.
    """
    r = z.rows
    k = z.values @ z.values.T / float(r)
    k = (k + k.T) * 0.5
    return Tensor(k, label="gram")


def center_rows(x: Tensor) -> Tensor:
    """Subtract the per-column mean so output column means are zero."""
    centered = x.values - x.values.mean(axis=0, keepdims=True)
    return Tensor(centered, label=x.label)


def _offdiag_norm(a: np.ndarray) -> float:
    b = a.copy()
    np.fill_diagonal(b, 0.0)
    return float(np.sqrt(np.sum(b * b)))


def _jacobi_eigvals(a: np.ndarray) -> np.ndarray:
    """Cyclic Jacobi eigenvalues of a symmetric matrix, unsorted."""
    n = a.shape[0]
    if n == 1:
        return a[0, :1].copy()
    norm = float(np.sqrt(np.sum(a * a)))
    if norm == 0.0:
        return np.zeros(n)
    tol = JACOBI_REL_TOL * norm
    # Skipping rotations far below the convergence tolerance saves sweeps
    # without affecting where the iteration stops.
    rot_floor = tol / (10.0 * n)
    for _ in range(JACOBI_MAX_SWEEPS):
        if _offdiag_norm(a) <= tol:
            return np.diag(a).copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= rot_floor:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = 0.5 * (aqq - app) / apq
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(1.0 + theta * theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
                a[p, q] = 0.0
                a[q, p] = 0.0
    off = _offdiag_norm(a)
    if off <= tol:
        return np.diag(a).copy()
    raise ConvergenceError(
        f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps "
        f"(off-diagonal norm {off:.3e})", off)


def sym_eigvals(k: Tensor) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, sorted descending.

    The input is symmetrized as (K + K^T)/2 before solving; asymmetry beyond
    1e-9 is rejected. Negative eigenvalues of magnitude below 1e-9 are
    numerical noise on PSD inputs and are zeroed; larger negative values are
    returned as-is.
    """
    if k.rows != k.cols:
        raise InvalidShape(f"sym_eigvals needs a square matrix, got {k.rows}x{k.cols}")
    asym = float(np.max(np.abs(k.values - k.values.T)))
    if asym > 1e-9:
        raise InvalidInput(f"matrix is not symmetric within 1e-9 (max asymmetry {asym:.3e})")
    a = ((k.values + k.values.T) * 0.5).copy()
    vals = _jacobi_eigvals(a)
    vals = np.where((vals < 0.0) & (vals > -EIG_NOISE_FLOOR), 0.0, vals)
    return np.sort(vals)[::-1].copy()
