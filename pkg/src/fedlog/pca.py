"""Two-component PCA by power iteration with deflation."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def top_components(X: np.ndarray, k: int = 2, iters: int = 1000, tol: float = 1e-12,
                   seed: int = 0) -> np.ndarray:
    """Leading ``k`` eigenvectors (rows) of the covariance of centered ``X``."""
    X = np.asarray(X, dtype=np.float64)
    cov = X.T @ X / max(1, len(X) - 1)
    rng = np.random.default_rng(seed)
    comps = []
    scale = max(float(np.trace(cov)), 1e-300)
    for _ in range(k):
        v = rng.normal(size=cov.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = cov @ v
            for c in comps:
                w -= (c @ w) * c
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * scale:
                raise ContractError("data has rank below the requested number of components")
            w /= nw
            done = abs(nw - lam) <= tol * scale and np.linalg.norm(w - v) < 1e-9
            v, lam = w, nw
            if done:
                break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
    return np.stack(comps)


def pca_project(original: np.ndarray, synthetic: np.ndarray, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Project both point clouds on the top-2 components of their centered union."""
    original = np.atleast_2d(np.asarray(original, dtype=np.float64))
    synthetic = np.atleast_2d(np.asarray(synthetic, dtype=np.float64))
    if original.shape[1] != synthetic.shape[1]:
        raise ContractError(f"feature widths differ: {original.shape[1]} vs {synthetic.shape[1]}")
    both = np.concatenate([original, synthetic])
    centered = both - both.mean(axis=0)
    if np.linalg.matrix_rank(centered) < 2:
        raise ContractError("the combined matrix has rank below 2")
    proj = centered @ top_components(centered, 2, seed=seed).T
    return proj[:len(original)], proj[len(original):]
