"""Laplace approximation for GP classification with the softmax likelihood.

The softmax Hessian ``W_i = diag(p_i) - p_i p_i^T`` has exactly the
structure of the nested-EP site precisions with ``pi_i = p_i`` (whose sum
is one), so Newton steps reuse :func:`nestedep.ep.refresh_posterior`.
Iterates are parameterised by ``a`` with ``f = K a``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .ep import EPError, PosteriorState, log_marginal_grad, refresh_posterior
from .kernel import build_covariance, covariance_grads, cross_covariance, jittered
from .predict import latent_predict

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
LA_MC_SAMPLES = 10_000


def softmax_probs(f):
    """Softmax along the last axis with max subtraction."""
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("softmax input must be finite")
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_lik(f, y):
    f_max = f.max(1)
    lse = f_max + np.log(np.exp(f - f_max[:, None]).sum(1))
    return float(np.sum(f[np.arange(y.size), y] - lse))


def _one_hot(y, c):
    out = np.zeros((y.size, c))
    out[np.arange(y.size), y] = 1.0
    return out


@dataclass
class LaplaceState:
    """Gaussian approximation around the posterior mode.

    ``mode`` and ``a`` are ``(n, c)`` with ``mode = K a``; ``W_blocks`` holds
    the ``c x c`` negative Hessians of the log-likelihood terms.
    """

    mode: np.ndarray
    a: np.ndarray
    W_blocks: np.ndarray
    probs: np.ndarray
    log_marginal: float
    post: PosteriorState
    converged: bool
    residual: float
    n_iter: int
    labels: np.ndarray


def _blocks(K_blocks, c):
    if isinstance(K_blocks, np.ndarray) and K_blocks.ndim == 2:
        return [K_blocks] * c
    return list(K_blocks)


def newton_mode(K_blocks, y, n_classes=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, init=None):
    """Find the posterior mode by Newton's method with step halving.

    Parameters
    ----------
    K_blocks : ndarray or list of ndarray
        Jittered prior covariance, shared by all classes or one per class.
    y : array_like of int
        Zero-based labels.
    n_classes : int, optional
        Defaults to ``len(K_blocks)`` for a list, else ``max(y) + 1``.
    tol : float
        Convergence threshold on ``max |grad log p(y|f) - a|``.
    init : ndarray, optional
        Starting ``a`` of shape ``(n, c)``.
    """
    y = np.asarray(y, dtype=int)
    if n_classes is None:
        n_classes = len(K_blocks) if isinstance(K_blocks, list) else int(y.max()) + 1
    c, n = n_classes, y.size
    Ks = _blocks(K_blocks, c)
    Y = _one_hot(y, c)

    def latent(a):
        return np.stack([Ks[k] @ a[:, k] for k in range(c)], axis=1)

    def psi(a, f):
        return -0.5 * np.sum(a * f) + _log_lik(f, y)

    a = np.zeros((n, c)) if init is None else np.array(init, dtype=float)
    f = latent(a)
    obj = psi(a, f)
    p = softmax_probs(f)
    residual = np.abs(Y - p - a).max()
    converged = residual < tol
    it = 0
    while not converged and it < max_iter:
        it += 1
        W = np.einsum("ik,kl->ikl", p, np.eye(c)) - p[:, :, None] * p[:, None, :]
        b = np.einsum("ikl,il->ik", W, f) + Y - p
        post = refresh_posterior(Ks, p, b, coupled=True)
        step = post.alpha - a
        t = 1.0
        slack = 1e-12 * max(1.0, abs(obj))     # round-off near the optimum
        for _ in range(40):
            a_new = a + t * step
            f_new = latent(a_new)
            obj_new = psi(a_new, f_new)
            if obj_new >= obj - slack:
                break
            t *= 0.5
        else:
            logger.warning("Newton line search failed to increase the log posterior")
            break
        a, f, obj = a_new, f_new, obj_new
        p = softmax_probs(f)
        residual = np.abs(Y - p - a).max()
        converged = residual < tol
    if not converged:
        logger.warning("Newton did not converge (residual %.3g)", residual)

    W = np.einsum("ik,kl->ikl", p, np.eye(c)) - p[:, :, None] * p[:, None, :]
    b = np.einsum("ikl,il->ik", W, f) + Y - p
    post = refresh_posterior(Ks, p, b, coupled=True)
    log_marg = _log_lik(f, y) - 0.5 * np.sum(a * f) - 0.5 * post.logdet
    return LaplaceState(f, a, W, p, float(log_marg), post, bool(converged), float(residual), it, y)


def laplace_fit(data, theta, init=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Laplace approximation for a dataset at hyperparameters ``theta``."""
    K = jittered(build_covariance(data.X, theta), theta)
    a0 = None if init is None else init.a
    return newton_mode(K, data.y, data.n_classes, tol, max_iter, a0)


def laplace_evidence_grad(state, X, theta):
    """Gradient of the Laplace log marginal likelihood in log-parameters.

    Adds the implicit term from the dependence of ``W`` on the mode to the
    explicit ``0.5 a^T dK a - 0.5 tr(M dK)`` part.
    """
    post = state.post
    p = state.probs
    Sigma = post.cov
    g = np.einsum("ikk->ik", Sigma) - 2.0 * np.einsum("ikl,il->ik", Sigma, p)
    s2 = -0.5 * p * (g - np.sum(p * g, axis=1, keepdims=True))
    c = p.shape[1]
    explicit = log_marginal_grad(post, X, theta)
    out = explicit.copy()
    Ks = post.K
    for j, dK in enumerate(covariance_grads(X, theta)):
        b1 = (dK @ state.a).T                               # (c, n)
        Mb = post.apply_M(b1[:, :, None])[:, :, 0]
        df = b1 - np.stack([Ks[k] @ Mb[k] for k in range(c)])
        out[j] += np.sum(s2.T * df)
    return out


def laplace_evidence(data, theta, init=None):
    """``(log marginal, gradient, state)`` of the Laplace approximation."""
    st = laplace_fit(data, theta, init)
    return st.log_marginal, laplace_evidence_grad(st, data.X, theta), st


def _mc_softmax(mean, cov, n_samples, seed):
    rng = np.random.default_rng(seed)
    m, c = mean.shape
    out = np.empty((m, c))
    for i in range(m):
        L = np.linalg.cholesky(cov[i] + 1e-12 * np.eye(c))
        f = mean[i] + rng.standard_normal((n_samples, c)) @ L.T
        out[i] = softmax_probs(f).mean(0)
    return out


def la_predict(state, Xstar, theta, X, n_samples=LA_MC_SAMPLES, seed=0):
    """Predictive class probabilities ``(m, c)`` by Monte Carlo over the latent."""
    mean, cov = latent_predict(state.post, Xstar, theta, X)
    return _mc_softmax(mean, cov, n_samples, seed)


@dataclass
class TkpResult:
    probs: np.ndarray       # (m, c)
    raw_sum: np.ndarray     # (m,)
    fallback: np.ndarray    # (m,) bool


def la_tkp_predict(data, theta, Xstar, base=None, warm_start=True, seed=0):
    """Predictive probabilities as ratios of extended Laplace marginals.

    For each test input and candidate class the test point is appended as an
    extra observation and the Laplace marginal of the extended problem is
    divided by that of the original problem.  With ``warm_start`` the
    extended Newton iteration starts at ``[f_hat; E[f*]]``.
    """
    Xstar = np.atleast_2d(Xstar)
    if base is None:
        base = laplace_fit(data, theta)
    c, n = data.n_classes, data.n
    K = build_covariance(data.X, theta)
    Kst = cross_covariance(data.X, Xstar, theta)
    m = Xstar.shape[0]
    probs = np.empty((m, c))
    raw = np.empty(m)
    fallback = np.zeros(m, dtype=bool)
    init = np.vstack([base.a, np.zeros((1, c))]) if warm_start else None
    K_ext = np.empty((n + 1, n + 1))
    K_ext[:n, :n] = K
    K_ext[n, n] = theta.magnitude
    for j in range(m):
        K_ext[:n, n] = Kst[:, j]
        K_ext[n, :n] = Kst[:, j]
        Kj = jittered(K_ext, theta)
        log_r = np.empty(c)
        try:
            for k in range(c):
                ext = newton_mode(Kj, np.append(data.y, k), c, init=init)
                if not ext.converged:
                    raise EPError("extended Newton iteration did not converge")
                log_r[k] = ext.log_marginal - base.log_marginal
        except (EPError, np.linalg.LinAlgError, FloatingPointError):
            logger.warning("LA-TKP failed at test point %d; using LA prediction", j)
            fallback[j] = True
            probs[j] = la_predict(base, Xstar[j:j + 1], theta, data.X, seed=seed)[0]
            raw[j] = 1.0
            continue
        top = log_r.max()
        w = np.exp(log_r - top)
        raw[j] = np.exp(top) * w.sum()
        probs[j] = w / w.sum()
    return TkpResult(probs, raw, fallback)
