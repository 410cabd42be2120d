"""PCA over transfer matrices to expose error-causing domain factors.

Rows (source domains) are the samples and columns (target domains) the
dimensions.  Per-domain activations are the sample scores of each row.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .fpda import FactorAssignment


@dataclass(frozen=True)
class TransferMatrix:
    domain_ids: tuple
    values: np.ndarray  # (m, m); row = source, column = target
    diagonal: str = "absent"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"transfer matrix must be square, got shape {v.shape}")
        if len(self.domain_ids) != v.shape[0]:
            raise ValueError("one domain id per row required")
        off = v[~np.eye(len(v), dtype=bool)]
        off = off[np.isfinite(off)]
        if off.size and (off.min() < 0.0 or off.max() > 1.0):
            raise ValueError("off-diagonal accuracies must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return len(self.domain_ids)

    @classmethod
    def from_fixture(cls, fixture) -> "TransferMatrix":
        return cls(tuple(fixture.domain_ids), fixture.matrix.copy(), "absent")


def fill_diagonal(matrix, value: float) -> TransferMatrix:
    if isinstance(matrix, TransferMatrix):
        ids, vals = matrix.domain_ids, matrix.values.copy()
    else:
        vals = np.array(matrix, dtype=float)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise ValueError(f"fill_diagonal needs a square matrix, got shape {vals.shape}")
        ids = tuple(range(1, len(vals) + 1))
    np.fill_diagonal(vals, value)
    return TransferMatrix(ids, vals, f"filled:{value:g}")


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("matrix must be symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.abs(a).max(initial=0.0)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(scale, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                g = 100.0 * abs(apq)
                # negligible next to both diagonal entries: zero it instead of rotating
                if abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = a[q, p] = 0.0
                    continue
                h = a[q, q] - a[p, p]
                if abs(h) + g == abs(h):
                    t = apq / h
                else:
                    theta = h / (2.0 * apq)
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True)
class PcaResult:
    domain_ids: tuple
    mean: np.ndarray  # (m,) column means
    components: np.ndarray  # (k, m) orthonormal rows
    eigenvalues: np.ndarray  # (k,) descending
    activations: np.ndarray  # (m, k) per-row scores
    total_variance: float  # sum of the retained eigenvalues
    full_eigenvalues: np.ndarray  # (m,) whole spectrum
    ddof: int

    @property
    def loadings(self) -> np.ndarray:
        """Component coefficients per target domain, shape (m, k)."""
        return self.components.T

    def activation(self, component: int) -> np.ndarray:
        return self.activations[:, component]


def pca(matrix, n_components: int | None = None, ddof: int = 1) -> PcaResult:
    """Rows as samples; covariance divisor ``m - ddof``.

    ``total_variance`` and the explained-variance ratios refer to the retained
    components, so with ``n_components=None`` they cover the whole spectrum.
    """
    if isinstance(matrix, TransferMatrix):
        ids, x = matrix.domain_ids, matrix.values
    else:
        x = np.asarray(matrix, dtype=float)
        ids = tuple(range(1, len(x) + 1))
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs at least two rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("PCA input contains non-finite entries (fill the diagonal first)")
    n, m = x.shape
    k = m if n_components is None else int(n_components)
    if not 1 <= k <= m:
        raise ValueError(f"n_components must lie in [1, {m}]")
    if n - ddof <= 0:
        raise ValueError("too few rows for the chosen divisor")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - ddof)
    w, v = jacobi_eigh(cov)
    w = np.clip(w, 0.0, None)
    for j in range(m):
        col = v[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            v[:, j] = -col
    comps = v[:, :k].T.copy()
    return PcaResult(
        domain_ids=tuple(ids),
        mean=mean,
        components=comps,
        eigenvalues=w[:k].copy(),
        activations=xc @ comps.T,
        total_variance=float(w[:k].sum()),
        full_eigenvalues=w,
        ddof=ddof,
    )


def explained_variance_ratio(result: PcaResult) -> np.ndarray:
    if not result.total_variance > 0:
        raise ValueError("zero total variance: ratios undefined")
    return result.eigenvalues / result.total_variance


def sign_grouping(activation: Sequence[float], domain_ids: Sequence | None = None, tol: float = 1e-12) -> FactorAssignment:
    """Two groups by activation sign: ``"pos"`` and ``"neg"``."""
    a = np.asarray(activation, dtype=float)
    ids = tuple(range(len(a))) if domain_ids is None else tuple(domain_ids)
    if len(ids) != len(a):
        raise ValueError("one domain id per activation required")
    for d, val in zip(ids, a):
        if abs(val) <= tol:
            raise ValueError(f"activation of domain {d} is zero within {tol}; sign undefined")
    return FactorAssignment("pca_sign", ids, tuple("pos" if val > 0 else "neg" for val in a))


def same_partition(a: FactorAssignment, b: FactorAssignment) -> bool:
    """True when two assignments split the same domains into the same blocks."""
    if set(a.domain_ids) != set(b.domain_ids):
        return False
    blocks = lambda asg: {frozenset(ds) for ds in asg.groups().values()}
    return blocks(a) == blocks(b)


def write_pca_csv(result: PcaResult, path: str | Path) -> None:
    ratios = explained_variance_ratio(result)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "domain", "activation", "eigenvalue", "ratio"])
        for c in range(len(result.eigenvalues)):
            for i, d in enumerate(result.domain_ids):
                w.writerow([c + 1, d, f"{result.activations[i, c]:.6f}", f"{result.eigenvalues[c]:.6f}", f"{ratios[c]:.6f}"])
