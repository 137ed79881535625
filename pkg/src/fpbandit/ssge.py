"""Spectral Stein gradient estimation of ``grad log q`` from samples.

The score of an implicit distribution is expanded in the Nystrom
eigenfunctions of an RBF Gram matrix built on the samples:

    psi_j(x)  = sqrt(M) / lambda_j * sum_m u_jm k(x, x_m)
    beta_j    = -(1/M) sum_m grad psi_j(x_m)
    g_hat(x)  = sum_j beta_j psi_j(x)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import as_matrix, symmetric_eig

EIGEN_FLOOR = 1e-10
TRACE_FRACTION = 0.99


@dataclass(frozen=True)
class RbfKernel:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ContractError(f"bandwidth must be positive, got {self.bandwidth}")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.exp(-_sq_dists(a, b) / (2.0 * self.bandwidth ** 2))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(samples) -> float:
    """Median pairwise Euclidean distance, or 1.0 when it is zero."""
    x = as_matrix(samples, "samples")
    m = x.shape[0]
    if m < 2:
        raise ContractError(f"median heuristic needs at least 2 samples, got {m}")
    iu = np.triu_indices(m, k=1)
    med = float(np.median(np.sqrt(_sq_dists(x, x)[iu])))
    return med if med > 0 else 1.0


@dataclass(frozen=True)
class SsgeModel:
    samples: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    bandwidth: float
    beta: np.ndarray

    @property
    def n_components(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def kernel(self) -> RbfKernel:
        return RbfKernel(self.bandwidth)

    def eigenfunctions(self, query: np.ndarray) -> np.ndarray:
        m = self.samples.shape[0]
        k = self.kernel(query, self.samples)
        return np.sqrt(m) * (k @ self.eigenvectors) / self.eigenvalues

    def score(self, query) -> np.ndarray:
        return score(self, query)


def fit(samples, n_components: Optional[int] = None,
        bandwidth: Optional[float] = None) -> SsgeModel:
    """Fit the estimator on ``samples`` of shape ``(M, d)``.

    With ``n_components=None`` the count is the smallest J whose eigenvalues
    cover 99% of the Gram trace. Components with eigenvalue <= 1e-10 are
    always dropped, so the model may keep fewer than requested.
    """
    x = as_matrix(samples, "samples")
    m = x.shape[0]
    if m < 2:
        raise ContractError(f"SSGE needs at least 2 samples, got {m}")
    if n_components is not None and not 1 <= n_components <= m:
        raise ContractError(f"n_components must lie in [1, {m}], got {n_components}")
    sigma = median_bandwidth(x) if bandwidth is None else float(bandwidth)
    gram = RbfKernel(sigma)(x, x)
    vals, vecs = symmetric_eig(gram)
    if n_components is None:
        cover = np.cumsum(np.clip(vals, 0.0, None)) / np.sum(np.clip(vals, 0.0, None))
        n_components = int(np.searchsorted(cover, TRACE_FRACTION) + 1)
    n_components = min(n_components, int(np.sum(vals > EIGEN_FLOOR)))
    vals, vecs = vals[:n_components], vecs[:, :n_components]

    # sum_m grad_x k(x, x_m') at x = x_m, summed over m, for every m'
    col = gram.sum(axis=0)
    pulled = gram.T @ x - col[:, None] * x                  # (M, d)
    grad_psi_sum = -np.sqrt(m) / sigma ** 2 * (vecs.T @ pulled) / vals[:, None]
    beta = -grad_psi_sum / m                                 # (J, d)
    return SsgeModel(x, vals, vecs, sigma, beta)


def score(model: SsgeModel, query) -> np.ndarray:
    """Estimated ``grad log q`` at each query row, shape ``(B, d)``."""
    q = as_matrix(query, "query")
    if q.shape[1] != model.samples.shape[1]:
        raise ShapeError(f"query has {q.shape[1]} columns, samples have "
                         f"{model.samples.shape[1]}")
    if model.n_components == 0:
        return np.zeros_like(q)
    return model.eigenfunctions(q) @ model.beta
