"""Gaussian mixture models: EM fitting, log-likelihood, posterior responsibilities.

All density work happens in the log domain (triangular factorization plus
log-sum-exp), so scoring stays finite for per-component log terms anywhere
in the representable range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

COVARIANCE_FLOOR = 1e-6
MODEL_FORMAT_VERSION = 1

_LOG_2PI = np.log(2.0 * np.pi)


def floor_covariance(cov: np.ndarray, floor: float = COVARIANCE_FLOOR) -> np.ndarray:
    """Symmetrize and clamp eigenvalues from below; guards against singular collapse."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(np.atleast_2d(np.asarray(cov, dtype=float)))
    except np.linalg.LinAlgError:
        raise ValueError("covariance matrix is not positive-definite") from None


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float | np.ndarray:
    """Log density of a D-variate Gaussian at ``x`` (one point or stacked rows)."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    chol = _cholesky(cov)
    dev = np.atleast_2d(x) - mean
    sol = solve_triangular(chol, dev.T, lower=True)
    maha = np.einsum("ij,ij->j", sol, sol)
    d = mean.shape[0]
    logdet_half = np.log(np.diag(chol)).sum()
    out = -0.5 * (d * _LOG_2PI + maha) - logdet_half
    return float(out[0]) if x.ndim == 1 else out


def mahalanobis(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    dev = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    sol = solve_triangular(_cholesky(cov), dev, lower=True)
    return float(np.sqrt(sol @ sol))


@dataclass
class GmmModel:
    """Mixture weights, means, and full covariances of M Gaussian components."""

    weights: np.ndarray
    means: np.ndarray  # (M, D)
    covariances: np.ndarray  # (M, D, D)
    fingerprint: str | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None]

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        if abs(self.weights.sum() - 1.0) > atol:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if self.means.shape != (self.m, self.d):
            raise ValueError("means shape does not match weights")
        if self.covariances.shape != (self.m, self.d, self.d):
            raise ValueError("covariances shape does not match means")
        for k in range(self.m):
            cov = self.covariances[k]
            if not np.allclose(cov, cov.T, atol=1e-8):
                raise ValueError(f"covariance of component {k} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < COVARIANCE_FLOOR - 1e-12:
                raise ValueError(f"covariance of component {k} is below the floor")

    def to_json(self) -> dict:
        doc = {
            "version": MODEL_FORMAT_VERSION,
            "m": self.m,
            "d": self.d,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }
        if self.fingerprint is not None:
            doc["fingerprint"] = self.fingerprint
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "GmmModel":
        return cls(
            weights=np.asarray(doc["weights"], dtype=float),
            means=np.asarray(doc["means"], dtype=float),
            covariances=np.asarray(doc["covariances"], dtype=float),
            fingerprint=doc.get("fingerprint"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GmmModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _component_logpdfs(model: GmmModel, data: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(data, dtype=float))
    if X.shape[1] != model.d:
        raise ValueError(f"data dimension {X.shape[1]} does not match model dimension {model.d}")
    out = np.empty((X.shape[0], model.m))
    for k in range(model.m):
        try:
            out[:, k] = gaussian_logpdf(X, model.means[k], model.covariances[k])
        except ValueError as exc:
            raise ValueError(f"component {k}: {exc}") from None
    return out


def _log_joint(model: GmmModel, data: np.ndarray) -> np.ndarray:
    return _component_logpdfs(model, data) + np.log(model.weights)


def per_point_loglik(model: GmmModel, data: np.ndarray) -> np.ndarray:
    """Per-row mixture log density via log-sum-exp over components."""
    return logsumexp(_log_joint(model, data), axis=1)


def loglik(model: GmmModel, data: np.ndarray) -> float:
    return float(per_point_loglik(model, data).sum())


def responsibility_matrix(model: GmmModel, data: np.ndarray) -> np.ndarray:
    lj = _log_joint(model, data)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def responsibilities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Posterior P(component | x) for a single point; sums to 1."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("responsibilities expects a single point; use responsibility_matrix for rows")
    return responsibility_matrix(model, x[None])[0]


def fit_em(
    data: np.ndarray,
    m: int = 3,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    diagonal: bool = False,
) -> tuple[GmmModel, list[float]]:
    """Fit an M-component mixture by EM; returns the model and its log-likelihood trace.

    Means start at m distinct random rows, every covariance at the global
    sample covariance, weights uniform.  A component whose responsibility
    mass drops below 2 points is reseeded once; a second collapse is an
    error.  Deterministic for a fixed seed and data.
    """
    X = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = X.shape
    if m < 1:
        raise ValueError("need at least one component")
    if n <= m:
        raise ValueError(f"need more than {m} rows to fit {m} components")

    rng = np.random.default_rng(seed)
    base_cov = floor_covariance(np.atleast_2d(np.cov(X, rowvar=False, ddof=1)))
    means = X[rng.choice(n, size=m, replace=False)].copy()
    covs = np.repeat(base_cov[None], m, axis=0)
    weights = np.full(m, 1.0 / m)
    model = GmmModel(weights, means, covs)

    trace: list[float] = []
    reseeded = np.zeros(m, dtype=bool)
    for _ in range(max_iter):
        lj = _log_joint(model, X)
        norm = logsumexp(lj, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        if len(trace) > 1 and ll - trace[-2] < tol:
            break
        resp = np.exp(lj - norm[:, None])
        nk = resp.sum(axis=0)

        starved = np.flatnonzero(nk < 2.0)
        if starved.size:
            for k in starved:
                if reseeded[k]:
                    raise RuntimeError(f"mixture component {k} starved of responsibility after reseeding")
                reseeded[k] = True
                model.means[k] = X[rng.integers(n)]
                model.covariances[k] = base_cov
                model.weights[k] = 1.0 / m
            model.weights = model.weights / model.weights.sum()
            continue

        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        covs = np.empty((m, d, d))
        for k in range(m):
            dev = X - means[k]
            cov = (resp[:, k, None] * dev).T @ dev / nk[k]
            if diagonal:
                cov = np.diag(np.diag(cov))
            covs[k] = floor_covariance(cov)
        model = GmmModel(weights, means, covs)
    return model, trace
