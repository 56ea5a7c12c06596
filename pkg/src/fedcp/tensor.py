"""Sparse 3-mode tensors in coordinate form, CP factor algebra, and fit metrics.

A factor matrix is a plain float64 ndarray of shape (rows, R). A rank-R
factorization of an I x J x K tensor is a triple (A, B, C) with shapes
(I, R), (J, R), (K, R); component r is the outer product of the three
r-th columns.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


def as_factor(data) -> np.ndarray:
    """Coerce to a 2-D float64 factor matrix, rejecting non-finite entries."""
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"factor matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("factor matrix contains non-finite entries")
    return m


@dataclass(frozen=True)
class SparseTensorCOO:
    """Observed 3-mode tensor stored as (i, j, k, value) records.

    Only non-zero values are stored (zeros are implicit). Indices are
    0-based, strictly inside ``dims``, and coordinates are unique.
    """

    dims: tuple[int, int, int]
    coords: np.ndarray  # (nnz, 3) int64
    values: np.ndarray  # (nnz,) float64

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise DimensionError(f"dims must be three positive integers, got {self.dims}")
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if coords.shape[0] != values.shape[0]:
            raise DimensionError("coords and values disagree on entry count")
        if coords.size:
            if coords.min() < 0 or np.any(coords >= np.asarray(dims)):
                raise ValueError("tensor entry index out of range")
            lin = np.ravel_multi_index((coords[:, 0], coords[:, 1], coords[:, 2]), dims)
            if np.unique(lin).size != lin.size:
                raise ValueError("duplicate tensor coordinates")
        if not np.all(np.isfinite(values)):
            raise ValueError("tensor values must be finite")
        if np.any(values == 0.0):
            raise ValueError("explicit zero values are not stored; drop them")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @property
    def nnz(self) -> int:
        return self.values.shape[0]

    def entries(self):
        """Iterate (i, j, k, value) tuples in storage order."""
        for (i, j, k), v in zip(self.coords, self.values):
            yield int(i), int(j), int(k), float(v)

    @classmethod
    def from_entries(cls, dims, entries):
        """Build from an iterable of (i, j, k, value) tuples."""
        rows = list(entries)
        if not rows:
            return cls(dims, np.empty((0, 3), dtype=np.int64), np.empty(0))
        arr = np.asarray(rows, dtype=np.float64)
        return cls(dims, arr[:, :3].astype(np.int64), arr[:, 3])

    def same_entries(self, other) -> bool:
        """True if both tensors hold identical entries, ignoring storage order."""
        if self.dims != other.dims or self.nnz != other.nnz:
            return False
        a = np.argsort(np.ravel_multi_index(self.coords.T, self.dims))
        b = np.argsort(np.ravel_multi_index(other.coords.T, other.dims))
        return bool(
            np.array_equal(self.coords[a], other.coords[b])
            and np.array_equal(self.values[a], other.values[b])
        )


@dataclass(frozen=True)
class FactorizationResult:
    """A factor triple with the derived per-component weights."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", as_factor(self.A))
        object.__setattr__(self, "B", as_factor(self.B))
        object.__setattr__(self, "C", as_factor(self.C))
        if not (self.A.shape[1] == self.B.shape[1] == self.C.shape[1]):
            raise DimensionError("factor matrices must share one rank")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """Component weights: product of the three column norms."""
        return factor_weights(self.A, self.B, self.C)


def khatri_rao(a, b) -> np.ndarray:
    """Columnwise Kronecker product of (I, R) and (J, R), giving (I*J, R).

    Column r of the result is kron(a[:, r], b[:, r]).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("khatri_rao expects two matrices")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"column counts differ: {a.shape[1]} vs {b.shape[1]}"
        )
    i, r = a.shape
    j = b.shape[0]
    return (a[:, None, :] * b[None, :, :]).reshape(i * j, r)


def reconstruct_entry(A, B, C, i, j, k) -> float:
    """Model value at (i, j, k): sum_r A[i, r] * B[j, r] * C[k, r].

    Delegates to reconstruct_values so that entrywise and vectorized
    reconstructions agree bit for bit.
    """
    for name, m, idx in (("A", A, i), ("B", B, j), ("C", C, k)):
        if not 0 <= idx < m.shape[0]:
            raise IndexError(f"index {idx} out of range for {name} with {m.shape[0]} rows")
    coords = np.array([[i, j, k]], dtype=np.int64)
    return float(reconstruct_values(np.asarray(A), np.asarray(B), np.asarray(C), coords)[0])


def reconstruct_values(A, B, C, coords) -> np.ndarray:
    """Model values at every (i, j, k) row of ``coords``, vectorized."""
    return np.einsum(
        "nr,nr,nr->n", A[coords[:, 0]], B[coords[:, 1]], C[coords[:, 2]]
    )


def rmse(observed: SparseTensorCOO, sites) -> float:
    """Root mean square error over the observed (non-zero) entries.

    ``sites`` is a list of FactorizationResult whose patient blocks stack,
    in order, to the observed tensor's first mode; each entry is scored
    against the factors of the site that owns its row.
    """
    if observed.nnz == 0:
        raise ValueError("rmse is undefined for a tensor with no entries")
    i_dim, j_dim, k_dim = observed.dims
    offsets = np.cumsum([0] + [s.A.shape[0] for s in sites])
    if offsets[-1] != i_dim:
        raise DimensionError(
            f"site patient rows sum to {offsets[-1]}, tensor has {i_dim}"
        )
    sq_sum = 0.0
    for t, site in enumerate(sites):
        if site.B.shape[0] != j_dim or site.C.shape[0] != k_dim:
            raise DimensionError(f"site {t} feature dims do not match the tensor")
        mask = (observed.coords[:, 0] >= offsets[t]) & (observed.coords[:, 0] < offsets[t + 1])
        if not mask.any():
            continue
        local = observed.coords[mask].copy()
        local[:, 0] -= offsets[t]
        resid = reconstruct_values(site.A, site.B, site.C, local) - observed.values[mask]
        sq_sum += float(np.sum(resid * resid))
    return float(np.sqrt(sq_sum / observed.nnz))


def l21_norm(w) -> float:
    """Sum of row 2-norms. On a transposed patient matrix this sums column norms."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.sqrt((w * w).sum(axis=1)).sum())


def factor_weights(A, B, C) -> np.ndarray:
    """Per-component weight: product of the column norms of the three modes."""
    A, B, C = (np.asarray(m, dtype=np.float64) for m in (A, B, C))
    if not (A.shape[1] == B.shape[1] == C.shape[1]):
        raise DimensionError("factor matrices must share one rank")
    return (
        np.linalg.norm(A, axis=0)
        * np.linalg.norm(B, axis=0)
        * np.linalg.norm(C, axis=0)
    )


def zero_column_count(A) -> int:
    """Number of exactly-zero columns (components shrunk away entirely)."""
    return int(np.sum(np.linalg.norm(np.asarray(A, dtype=np.float64), axis=0) == 0.0))


@dataclass(frozen=True)
class FmsReport:
    """Factor match score plus the per-component evidence behind it.

    ``permutation[r]`` is the column of Y matched to column r of X;
    ``cosine_products`` are the per-pair products of mode cosines;
    ``weights_x``/``weights_y`` are the matched component weights.
    """

    score: float
    permutation: np.ndarray
    cosine_products: np.ndarray
    weights_x: np.ndarray
    weights_y: np.ndarray
    column_scores: np.ndarray


def _cosine_matrix(mx, my) -> np.ndarray:
    # zero-norm columns get cosine 0 rather than NaN
    nx = np.linalg.norm(mx, axis=0)
    ny = np.linalg.norm(my, axis=0)
    gram = mx.T @ my
    denom = np.outer(nx, ny)
    return np.divide(gram, denom, out=np.zeros_like(gram), where=denom > 0)


def fms_report(x: FactorizationResult, y: FactorizationResult) -> FmsReport:
    """Match components greedily, then score the matched pairs.

    Per matched pair the score is the product of the three mode cosines,
    discounted by the relative gap of the component weights; the overall
    score is the mean over components and lies in [-1, 1]. Matching makes
    the score invariant to a simultaneous column permutation of Y.
    """
    if x.rank != y.rank:
        raise DimensionError(f"rank mismatch: {x.rank} vs {y.rank}")
    for name, mx, my in (("A", x.A, y.A), ("B", x.B, y.B), ("C", x.C, y.C)):
        if mx.shape[0] != my.shape[0]:
            raise DimensionError(f"mode {name} row counts differ")
    r = x.rank
    products = (
        _cosine_matrix(x.A, y.A)
        * _cosine_matrix(x.B, y.B)
        * _cosine_matrix(x.C, y.C)
    )
    # greedy: best remaining (row, column) pair first, each used once
    work = products.copy()
    permutation = np.full(r, -1, dtype=np.int64)
    for _ in range(r):
        flat = int(np.argmax(work))
        row, col = divmod(flat, r)
        permutation[row] = col
        work[row, :] = -np.inf
        work[:, col] = -np.inf

    xi = x.weights
    xi_bar = y.weights[permutation]
    cos = products[np.arange(r), permutation]
    biggest = np.maximum(xi, xi_bar)
    gap = np.divide(
        np.abs(xi - xi_bar), biggest, out=np.zeros_like(biggest), where=biggest > 0
    )
    column_scores = (1.0 - gap) * cos
    return FmsReport(
        score=float(column_scores.mean()),
        permutation=permutation,
        cosine_products=cos,
        weights_x=xi,
        weights_y=xi_bar,
        column_scores=column_scores,
    )


def fms(x: FactorizationResult, y: FactorizationResult) -> float:
    """Factor match score in [-1, 1]; 1 means identical components."""
    return fms_report(x, y).score
