"""Latent predictive distributions and multinomial probit class probabilities."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, ndtr

from .inner_ep import InnerEPError, tilted_moments_batch
from .kernel import cross_covariance

logger = logging.getLogger(__name__)

MC_FALLBACK_SAMPLES = 100_000


@dataclass
class PredictiveDistribution:
    """Predictions at ``m`` test inputs.

    ``raw_sum`` is the sum of the per-class EP normalisers before
    renormalisation; ``fallback`` marks points whose probabilities came from
    the Monte Carlo fallback.
    """

    latent_mean: np.ndarray     # (m, c)
    latent_cov: np.ndarray      # (m, c, c)
    probs: np.ndarray           # (m, c)
    raw_sum: np.ndarray         # (m,)
    fallback: np.ndarray        # (m,) bool


def latent_predict(state, Xstar, theta, X):
    """Mean ``K*^T (I - M K) nu`` and covariance ``K** - K*^T M K*``.

    Returns arrays of shape ``(m, c)`` and ``(m, c, c)``.
    """
    Ks = cross_covariance(X, Xstar, theta)            # (n, m)
    c = state.n_classes
    m = Ks.shape[1]
    mean = Ks.T @ state.alpha
    BK = state.B @ Ks[None]                          # (c, n, m)
    cov = np.zeros((m, c, c))
    diag_term = np.einsum("nm,knm->mk", Ks, BK)
    idx = np.arange(c)
    cov[:, idx, idx] = theta.magnitude - diag_term
    if state.coupled:
        G = solve_triangular(state.chol_P, BK.transpose(1, 0, 2).reshape(state.n, c * m), lower=True)
        G = G.reshape(state.n, c, m)
        cov += np.einsum("rkm,rlm->mkl", G, G)
    return mean, 0.5 * (cov + np.swapaxes(cov, 1, 2))


def mc_class_probabilities(mean, cov, n_samples=MC_FALLBACK_SAMPLES, seed=0):
    """Monte Carlo estimate of the multinomial probit class probabilities."""
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    c = mean.size
    L = np.linalg.cholesky(cov + 1e-12 * np.eye(c))
    f = mean + rng.standard_normal((n_samples, c)) @ L.T
    u = rng.standard_normal(n_samples)
    out = np.empty(c)
    for k in range(c):
        w = np.ones(n_samples)
        for j in range(c):
            if j != k:
                w *= ndtr(u + f[:, k] - f[:, j])
        out[k] = w.mean()
    return out


def class_log_normalizers(means, covs):
    """Per-class EP normalisers ``log Z_k`` of shape (m, c)."""
    means = np.atleast_2d(means)
    m, c = means.shape
    covs = np.asarray(covs).reshape(m, c, c)
    out = np.empty((m, c))
    for k in range(c):
        out[:, k] = tilted_moments_batch(means, covs, np.full(m, k), sweeps=None)[0]
    return out


def class_probabilities(mean, cov, seed=0):
    """Class probabilities of a Gaussian latent vector.

    Each class probability is the normaliser of a tilted distribution with
    that class as label, estimated with inner EP from cold sites.  Returns
    ``(probs, raw_sum, fallback)``.
    """
    probs, raw, fb = class_probabilities_batch(np.asarray(mean)[None], np.asarray(cov)[None], seed)
    return probs[0], float(raw[0]), bool(fb[0])


def class_probabilities_batch(means, covs, seed=0):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    m, c = means.shape
    covs = np.asarray(covs, dtype=float).reshape(m, c, c)
    fallback = np.zeros(m, dtype=bool)
    try:
        log_z = class_log_normalizers(means, covs)
    except (InnerEPError, np.linalg.LinAlgError, FloatingPointError):
        log_z = np.empty((m, c))
        for i in range(m):
            try:
                log_z[i] = class_log_normalizers(means[i], covs[i])[0]
            except (InnerEPError, np.linalg.LinAlgError, FloatingPointError):
                fallback[i] = True
                log_z[i] = np.log(np.maximum(mc_class_probabilities(means[i], covs[i], seed=seed), 1e-300))
    bad = ~np.all(np.isfinite(log_z), axis=1)
    for i in np.flatnonzero(bad & ~fallback):
        fallback[i] = True
        log_z[i] = np.log(np.maximum(mc_class_probabilities(means[i], covs[i], seed=seed), 1e-300))
    if np.any(fallback):
        logger.warning("Monte Carlo fallback used for %d test points", fallback.sum())
    norm = logsumexp(log_z, axis=1)
    return np.exp(log_z - norm[:, None]), np.exp(norm), fallback


def predict(state, Xstar, theta, X, seed=0):
    """Full predictive distribution at ``Xstar`` from a posterior state."""
    mean, cov = latent_predict(state, Xstar, theta, X)
    probs, raw, fb = class_probabilities_batch(mean, cov, seed)
    return PredictiveDistribution(mean, cov, probs, raw, fb)


def training_probabilities(state, seed=0):
    """Class probabilities at the training inputs from the posterior marginals."""
    probs, raw, fb = class_probabilities_batch(state.mean, state.cov, seed)
    return PredictiveDistribution(state.mean, state.cov, probs, raw, fb)
