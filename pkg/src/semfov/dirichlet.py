"""Dirichlet distribution kernel: density, moments, sampling, divergence and MLE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

SCORE_EPS = 1e-6  # clamp floor applied to scores before any log


def as_params(alpha) -> np.ndarray:
    """Validate a concentration vector and return it as a float array."""
    a = np.asarray(alpha, dtype=float)
    if a.ndim != 1 or a.size < 2:
        raise ValueError(f"concentration must be a vector of length >= 2, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError(f"concentration must be strictly positive, got {a}")
    return a


def clamp_scores(s, eps: float = SCORE_EPS) -> np.ndarray:
    """Clamp score vectors to ``eps`` and renormalize along the last axis."""
    s = np.maximum(np.asarray(s, dtype=float), eps)
    return s / s.sum(axis=-1, keepdims=True)


def normalize_scores(s) -> np.ndarray:
    """Divide a nonnegative score vector by its sum.

    Raises:
        ValueError: If a component is negative or non-finite, or the sum is zero.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size < 2:
        raise ValueError(f"score vector must have length >= 2, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError(f"score components must be finite and nonnegative, got {s}")
    total = s.sum()
    if total <= 0:
        raise ValueError("score vector sums to zero and cannot be normalized")
    return s / total


def log_normalizer(alpha) -> np.ndarray:
    """log Gamma(sum a) - sum log Gamma(a_i), broadcast over leading axes."""
    a = np.asarray(alpha, dtype=float)
    return gammaln(a.sum(axis=-1)) - gammaln(a).sum(axis=-1)


def log_pdf(s, alpha):
    """Log Dirichlet density of score vector(s) ``s`` under ``alpha``.

    ``s`` may be a single vector or an ``(n, K+1)`` array; scores are clamped
    away from the simplex boundary first.
    """
    a = as_params(alpha)
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != a.size:
        raise ValueError(f"dimension mismatch: scores have {s.shape[-1]} components, alpha has {a.size}")
    s = clamp_scores(s)
    out = log_normalizer(a) + np.sum((a - 1.0) * np.log(s), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mean(alpha) -> np.ndarray:
    a = as_params(alpha)
    return a / a.sum()


def categorical_covariance(alpha) -> np.ndarray:
    """Covariance of the class indicator under the mean categorical.

    Off-diagonal entries are ``-p_i p_j`` and the diagonal is ``p_i (1 - p_i)``,
    so each row sums to zero.
    """
    p = mean(alpha)
    return np.diag(p) - np.outer(p, p)


def kl_divergence(a, b) -> float:
    """Closed-form KL(Dir(a) || Dir(b))."""
    a = as_params(a)
    b = as_params(b)
    if a.size != b.size:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    return float(np.maximum(kl_divergence_batch(a, b), 0.0))


def kl_divergence_batch(a, b) -> np.ndarray:
    """Unvalidated KL(Dir(a) || Dir(b)) broadcast over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0 = a.sum(axis=-1, keepdims=True)
    cross = np.sum((a - b) * (digamma(a) - digamma(a0)), axis=-1)
    return log_normalizer(a) - log_normalizer(b) + cross


def sample(alpha, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw score vector(s) from Dir(alpha) using the caller's generator."""
    a = as_params(alpha)
    return rng.dirichlet(a, size=size)


def sample_rows(alphas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet draw per row of ``alphas`` via normalized gamma variates."""
    g = rng.standard_gamma(alphas)
    total = g.sum(axis=-1, keepdims=True)
    # all-zero rows only arise from denormal gammas at tiny alpha
    bad = total[..., 0] <= 0
    if np.any(bad):
        g[bad] = alphas[bad]
        total = g.sum(axis=-1, keepdims=True)
    return g / total


def inverse_digamma(y, tol: float = 1e-14, max_iter: int = 50) -> np.ndarray:
    """Solve digamma(x) = y by Newton's method with Minka's starting point."""
    y = np.asarray(y, dtype=float)
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y - digamma(1.0)))
    for _ in range(max_iter):
        step = (digamma(x) - y) / polygamma(1, x)
        x = x - step
        if np.all(np.abs(step) <= tol * np.abs(x)):
            break
    return x


@dataclass(frozen=True)
class DirichletFit:
    """Result of :func:`fit_mle`.

    ``log_likelihood`` holds the mean per-sample log-likelihood after the
    initial guess and after every fixed-point iteration.
    """

    alpha: np.ndarray
    converged: bool
    n_iter: int
    log_likelihood: np.ndarray


def _mean_log_likelihood(alpha: np.ndarray, mean_log_s: np.ndarray) -> float:
    return float(log_normalizer(alpha) + np.sum((alpha - 1.0) * mean_log_s))


def moment_match(s: np.ndarray) -> np.ndarray:
    """Moment-matching initial guess from sample means and mean squares."""
    m1 = s.mean(axis=0)
    m2 = (s**2).mean(axis=0)
    var = m2 - m1**2
    ok = var > 0
    if np.any(ok):
        precision = np.median((m1[ok] - m2[ok]) / var[ok])
    else:
        precision = 1.0
    if not np.isfinite(precision) or precision <= 0:
        precision = 1.0
    return np.maximum(precision * m1, 1e-3)


def fit_mle(samples, tol: float = 1e-7, max_iter: int = 1000) -> DirichletFit:
    """Maximum-likelihood Dirichlet fit by Minka's fixed-point iteration.

    Each step solves ``digamma(a_k) = digamma(sum a) + mean(log s_k)``. The
    iteration stops when the relative infinity-norm change of ``alpha`` drops
    below ``tol``; if ``max_iter`` is hit first, the current estimate is
    returned with ``converged=False``.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ValueError("fit_mle needs at least 2 samples given as an (n, K+1) array")
    s = clamp_scores(s)
    mean_log_s = np.log(s).mean(axis=0)

    alpha = moment_match(s)
    trace = [_mean_log_likelihood(alpha, mean_log_s)]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new = inverse_digamma(digamma(alpha.sum()) + mean_log_s)
        change = np.max(np.abs(new - alpha)) / np.max(np.abs(alpha))
        alpha = new
        trace.append(_mean_log_likelihood(alpha, mean_log_s))
        if change < tol:
            converged = True
            break
    return DirichletFit(alpha=alpha, converged=converged, n_iter=n_iter, log_likelihood=np.asarray(trace))
