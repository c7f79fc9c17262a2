"""Seeded randomness, sparse matrices and spectral-radius estimation.

The generator is xoshiro256** seeded through splitmix64 so that a reservoir
can be rebuilt bit-for-bit from nothing but its 64-bit seed.
"""
from __future__ import annotations

import math
from typing import Iterable, Union

import numpy as np
import scipy.sparse

from .errors import InvalidRangeError, NonConvergenceError, ShapeError

MASK64 = 0xFFFFFFFFFFFFFFFF
_TWO_POW_M53 = 1.0 / (1 << 53)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (the state is advanced first)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_label(label: Union[int, str]) -> int:
    """Map a stream label to 64 bits. Strings go through FNV-1a."""
    if isinstance(label, int):
        return label & MASK64
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def child_seed(seed: int, label: Union[int, str]) -> int:
    return splitmix64((seed & MASK64) ^ stream_label(label))


class Prng:
    """xoshiro256** generator. Instances are single-owner; never share one across threads."""

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        if seed < 0 or seed > MASK64:
            raise InvalidRangeError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        x = seed
        state = []
        for _ in range(4):
            state.append(splitmix64(x))
            x = (x + 0x9E3779B97F4A7C15) & MASK64
        self._s = state

    @property
    def state(self) -> tuple:
        return tuple(self._s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _TWO_POW_M53

    def uniform(self, lo: float, hi: float) -> float:
        if not lo < hi:
            raise InvalidRangeError(f"uniform requires lo < hi, got [{lo}, {hi})")
        while True:
            v = lo + (hi - lo) * self.random()
            if v < hi:
                return v

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise InvalidRangeError(f"randbelow requires n > 0, got {n}")
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def sample(self, population: int, k: int) -> list:
        """``k`` distinct integers from range(population), in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= population:
            raise InvalidRangeError(f"cannot draw {k} distinct values from {population}")
        swapped: dict = {}
        out = []
        for i in range(k):
            j = i + self.randbelow(population - i)
            out.append(swapped.get(j, j))
            swapped[j] = swapped.get(i, i)
        return out

    def uniform_array(self, n: int, lo: float, hi: float) -> np.ndarray:
        return np.array([self.uniform(lo, hi) for _ in range(n)], dtype=np.float64)

    def split(self, label: Union[int, str]) -> "Prng":
        """Independent child stream; depends only on this generator's seed and the label."""
        return Prng(child_seed(self.seed, label))


def prng_uniform(p: Prng, lo: float, hi: float) -> float:
    return p.uniform(lo, hi)


class SparseMatrix:
    """Immutable COO matrix with entries kept in row-major sorted order.

    Canonical ordering means two matrices built from the same entries compare
    equal bit-for-bit regardless of the order the entries were supplied in.
    """

    __slots__ = ("rows", "cols", "row_idx", "col_idx", "values", "_csr", "_csr_t")

    def __init__(self, rows: int, cols: int, entries: Iterable = ()):
        if rows <= 0 or cols <= 0:
            raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
        entries = list(entries)
        if entries:
            r, c, v = (np.asarray(a) for a in zip(*entries))
        else:
            r = c = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        self._init_arrays(rows, cols, r, c, v)

    @classmethod
    def from_arrays(cls, rows, cols, row_idx, col_idx, values) -> "SparseMatrix":
        obj = cls.__new__(cls)
        if rows <= 0 or cols <= 0:
            raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
        obj._init_arrays(rows, cols, np.asarray(row_idx), np.asarray(col_idx), np.asarray(values))
        return obj

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ShapeError("from_dense expects a 2-D array")
        r, c = np.nonzero(dense)
        return cls.from_arrays(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls.from_arrays(n, n, idx, idx, np.ones(n))

    def _init_arrays(self, rows, cols, r, c, v):
        r = r.astype(np.int64, copy=True).ravel()
        c = c.astype(np.int64, copy=True).ravel()
        v = v.astype(np.float64, copy=True).ravel()
        if not (len(r) == len(c) == len(v)):
            raise ShapeError("row, column and value arrays differ in length")
        if len(r) and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise ShapeError("sparse entry index out of bounds")
        if not np.all(np.isfinite(v)):
            raise ValueError("sparse matrix values must be finite")
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        flat = r * cols + c
        if len(flat) > 1 and np.any(flat[1:] == flat[:-1]):
            raise ValueError("duplicate sparse entries")
        for a in (r, c, v):
            a.flags.writeable = False
        self.rows, self.cols = int(rows), int(cols)
        self.row_idx, self.col_idx, self.values = r, c, v
        self._csr = None
        self._csr_t = None

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def entries(self) -> list:
        return list(zip(self.row_idx.tolist(), self.col_idx.tolist(), self.values.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.row_idx, self.col_idx] = self.values
        return out

    def scaled(self, factor: float) -> "SparseMatrix":
        return SparseMatrix.from_arrays(self.rows, self.cols, self.row_idx, self.col_idx,
                                        self.values * factor)

    @property
    def csr(self):
        if self._csr is None:
            self._csr = scipy.sparse.csr_array(
                (self.values, (self.row_idx, self.col_idx)), shape=self.shape)
        return self._csr

    @property
    def csr_t(self):
        if self._csr_t is None:
            self._csr_t = scipy.sparse.csr_array(
                (self.values, (self.col_idx, self.row_idx)), shape=(self.cols, self.rows))
        return self._csr_t

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``M @ x`` along the last axis of ``x`` (works for single vectors and batches)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.cols:
            raise ShapeError(f"expected trailing dim {self.cols}, got {x.shape[-1]}")
        flat = x.reshape(-1, self.cols)
        out = (self.csr @ flat.T).T
        return np.ascontiguousarray(out).reshape(x.shape[:-1] + (self.rows,))

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        """``M.T @ y`` along the last axis of ``y``."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.rows:
            raise ShapeError(f"expected trailing dim {self.rows}, got {y.shape[-1]}")
        flat = y.reshape(-1, self.rows)
        out = (self.csr_t @ flat.T).T
        return np.ascontiguousarray(out).reshape(y.shape[:-1] + (self.cols,))

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (self.shape == other.shape
                and np.array_equal(self.row_idx, other.row_idx)
                and np.array_equal(self.col_idx, other.col_idx)
                and self.values.tobytes() == other.values.tobytes())

    __hash__ = None

    def __repr__(self):
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def sparse_matvec(m: SparseMatrix, v) -> np.ndarray:
    """Exact ``m @ v``; accumulates each row in column order."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != m.cols:
        raise ShapeError(f"vector of length {m.cols} required, got shape {v.shape}")
    return np.bincount(m.row_idx, weights=m.values * v[m.col_idx], minlength=m.rows)


def estimate_spectral_radius(m: SparseMatrix, max_iters: int = 5000, tol: float = 1e-12,
                             seed: int = 0x5EED, restarts: int = 3) -> float:
    """Largest |eigenvalue| of a square sparse matrix.

    Runs power iteration on a small orthonormal block (width up to 4) and takes
    the largest-magnitude eigenvalue of the projected block as the Rayleigh
    quotient, so a complex-conjugate dominant pair converges like a real one.
    Convergence is declared when two successive magnitudes differ by less than
    ``tol`` (relative to the estimate). Up to ``restarts`` random starts are tried.
    """
    if m.rows != m.cols:
        raise ShapeError(f"spectral radius needs a square matrix, got {m.shape}")
    if max_iters < 1:
        raise InvalidRangeError("max_iters must be >= 1")
    n = m.rows
    if m.nnz == 0:
        return 0.0
    width = min(n, 4)
    zero_floor = 1e-13 * float(np.linalg.norm(m.values))
    rng = Prng(seed)
    best = math.nan
    for attempt in range(restarts):
        stream = rng.split(attempt)
        q = stream.uniform_array(n * width, -1.0, 1.0).reshape(n, width)
        q, _ = np.linalg.qr(q)
        prev = None
        for _ in range(max_iters):
            z = m.csr @ q
            ritz = np.linalg.eigvals(q.T @ z)
            est = float(np.max(np.abs(ritz)))
            best = est
            if prev is not None and abs(est - prev) <= tol * est:
                return est
            prev = est
            q, r = np.linalg.qr(z)
            # iterates collapsed: the block was annihilated, so the radius is numerically zero
            if np.max(np.abs(np.diag(r))) <= zero_floor:
                return 0.0
    raise NonConvergenceError(
        f"power iteration did not converge within {max_iters} iterations x {restarts} restarts",
        best)
