"""Dense reference computations used as independent test oracles.

Everything here works on the full ``cn x cn`` matrices with plain inverses,
so it shares no linear-algebra path with the structured implementation.
"""

import numpy as np
from scipy.special import log_ndtr


def projected_site_precision(tau, label, c):
    """``Z (T^-1 + 1 1^T)^-1 Z^T`` with ``Z = e_y 1^T - E_{-y}``."""
    others = [j for j in range(c) if j != label]
    Z = np.zeros((c, c - 1))
    Z[label, :] = 1.0
    Z[others, range(c - 1)] = -1.0
    inner = np.linalg.inv(np.diag(1.0 / np.asarray(tau)) + np.ones((c - 1, c - 1)))
    return Z @ inner @ Z.T


def projected_site_location(tau, nu, label, c):
    """``Z (nu - tau a)`` with ``a = 1^T nu / (1 + 1^T tau)``."""
    others = [j for j in range(c) if j != label]
    Z = np.zeros((c, c - 1))
    Z[label, :] = 1.0
    Z[others, range(c - 1)] = -1.0
    a = np.sum(nu) / (1.0 + np.sum(tau))
    return Z @ (np.asarray(nu) - np.asarray(tau) * a)


def stacked_pi(tau, labels, c):
    n = len(labels)
    pi = np.ones((n, c))
    for i, y in enumerate(labels):
        pi[i, [j for j in range(c) if j != y]] = tau[i]
    return pi


def dense_site_matrix(pi, coupled=True):
    """``T = D - D R (R^T D R)^-1 R^T D`` in class-major ordering."""
    n, c = pi.shape
    D = np.diag(pi.T.ravel())
    if not coupled:
        return D
    R = np.tile(np.eye(n), (c, 1))
    return D - D @ R @ np.linalg.inv(R.T @ D @ R) @ R.T @ D


def dense_posterior(K, pi, nu, coupled=True):
    """Posterior mean (n, c), marginal covariances (n, c, c), log|I + K T|."""
    n, c = pi.shape
    Kf = np.kron(np.eye(c), K)
    T = dense_site_matrix(pi, coupled)
    S = np.linalg.inv(np.linalg.inv(Kf) + T)
    mu = S @ nu.T.ravel()
    mean = mu.reshape(c, n).T
    cov = np.empty((n, c, c))
    for i in range(n):
        idx = [k * n + i for k in range(c)]
        cov[i] = S[np.ix_(idx, idx)]
    _, logdet = np.linalg.slogdet(np.eye(c * n) + Kf @ T)
    return mean, cov, logdet, S


def dense_inner_log_z(mean, cov, label, tau, nu):
    """EP normaliser of the augmented tilted distribution for fixed sites."""
    c = mean.size
    others = [j for j in range(c) if j != label]
    Zp = np.zeros((c + 1, c - 1))
    Zp[label, :] = 1.0
    Zp[others, range(c - 1)] = -1.0
    Zp[c, :] = 1.0
    Sw = np.zeros((c + 1, c + 1))
    Sw[:c, :c] = cov
    Sw[c, c] = 1.0
    mw = np.append(mean, 0.0)
    g = Zp.T @ mw
    C = Zp.T @ Sw @ Zp
    Ci = np.linalg.inv(C)
    Ss = np.linalg.inv(Ci + np.diag(tau))
    ms = Ss @ (Ci @ g + nu)
    total = 0.0
    for j in range(c - 1):
        v, m = Ss[j, j], ms[j]
        vc = 1.0 / (1.0 / v - tau[j])
        mc = vc * (m / v - nu[j])
        log_zhat = log_ndtr(mc / np.sqrt(1.0 + vc))
        total += log_zhat - (0.5 * m * m / v - 0.5 * mc * mc / vc + 0.5 * np.log(v / vc))
    total += 0.5 * ms @ np.linalg.solve(Ss, ms) - 0.5 * g @ Ci @ g
    total += 0.5 * (np.linalg.slogdet(Ss)[1] - np.linalg.slogdet(C)[1])
    return total


def dense_log_z(K, tau, nu_inner, labels, c):
    """EP marginal likelihood from dense matrices for structured sites."""
    n = len(labels)
    pi = stacked_pi(tau, labels, c)
    loc = np.array([projected_site_location(tau[i], nu_inner[i], labels[i], c) for i in range(n)])
    mean, cov, logdet, _ = dense_posterior(K, pi, loc)
    total = 0.5 * np.sum(loc * mean) - 0.5 * logdet
    for i in range(n):
        Pi = projected_site_precision(tau[i], labels[i], c)
        Li = np.linalg.inv(cov[i])
        Lc = Li - Pi
        Sc = np.linalg.inv(Lc)
        mc = Sc @ (Li @ mean[i] - loc[i])
        total += dense_inner_log_z(mc, Sc, labels[i], tau[i], nu_inner[i])
        total += 0.5 * (mc @ Lc @ mc + np.linalg.slogdet(Sc)[1])
        total -= 0.5 * (mean[i] @ Li @ mean[i] + np.linalg.slogdet(cov[i])[1])
    return total


def mc_tilted(mean, cov, label, n_samples, rng, chunk=1_000_000):
    """Importance-free Monte Carlo of the tilted normaliser and moments.

    Samples ``(f, u)`` from the cavity and weights by the probit product.
    """
    from scipy.special import ndtr

    c = len(mean)
    L = np.linalg.cholesky(cov)
    others = [j for j in range(c) if j != label]
    sw = 0.0
    s1 = np.zeros(c)
    s2 = np.zeros((c, c))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        f = mean + rng.standard_normal((m, c)) @ L.T
        u = rng.standard_normal(m)
        w = np.ones(m)
        for j in others:
            w *= ndtr(u + f[:, label] - f[:, j])
        sw += w.sum()
        s1 += w @ f
        s2 += (f * w[:, None]).T @ f
        done += m
    Z = sw / n_samples
    mu = s1 / sw
    return Z, mu, s2 / sw - np.outer(mu, mu)


def mc_class_probs(mean, cov, n_samples, rng):
    """Monte Carlo multinomial probit class probabilities of ``N(mean, cov)``."""
    from scipy.special import ndtr

    c = len(mean)
    L = np.linalg.cholesky(cov)
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


def loop_covariance(X1, X2, log_s2, log_ls):
    """Entrywise SE covariance with explicit Python loops."""
    import math

    X1, X2 = np.atleast_2d(X1), np.atleast_2d(X2)
    d = X1.shape[1]
    ls = np.broadcast_to(np.exp(np.atleast_1d(log_ls)), (d,))
    out = np.empty((X1.shape[0], X2.shape[0]))
    for i in range(X1.shape[0]):
        for j in range(X2.shape[0]):
            s = sum(((X1[i, k] - X2[j, k]) / ls[k]) ** 2 for k in range(d))
            out[i, j] = math.exp(log_s2) * math.exp(-0.5 * s)
    return out


def quad_probit_moments(m, v):
    """``Phi(x) N(x | m, v)`` normaliser, mean and variance by adaptive quadrature."""
    from scipy.integrate import quad
    from scipy.stats import norm

    sd = np.sqrt(v)
    lo, hi = m - 40 * sd, m + 40 * sd

    def moment(p):
        return quad(lambda x: x**p * norm.cdf(x) * norm.pdf(x, m, sd), lo, hi,
                    epsabs=0, epsrel=1e-13, limit=200)[0]

    Z = moment(0)
    mean = moment(1) / Z
    return Z, mean, moment(2) / Z - mean**2


def dense_laplace(K, y, c, n_iter=60):
    """Plain Newton on the stacked ``cn`` softmax posterior.

    Returns ``(F (n, c), log marginal)`` using dense inverses throughout.
    """
    from scipy.special import softmax

    n = len(y)
    Kf = np.kron(np.eye(c), K)
    Ki = np.linalg.inv(Kf)
    Y = np.zeros((n, c))
    Y[np.arange(n), y] = 1.0
    f = np.zeros(c * n)

    def hessian(P):
        W = np.zeros((c * n, c * n))
        for i in range(n):
            idx = [k * n + i for k in range(c)]
            W[np.ix_(idx, idx)] = np.diag(P[i]) - np.outer(P[i], P[i])
        return W

    for _ in range(n_iter):
        P = softmax(f.reshape(c, n).T, axis=1)
        W = hessian(P)
        f = np.linalg.solve(Ki + W, W @ f + (Y - P).T.ravel())
    F = f.reshape(c, n).T
    P = softmax(F, axis=1)
    W = hessian(P)
    lm = (np.sum(np.log(P[np.arange(n), y])) - 0.5 * f @ Ki @ f
          - 0.5 * np.linalg.slogdet(np.eye(c * n) + Kf @ W)[1])
    return F, lm


def rejection_cone(f, label, n_samples, rng):
    """Draws of ``N(f, I)`` kept only when coordinate ``label`` is the largest."""
    f = np.asarray(f, dtype=float)
    out = []
    kept = 0
    while kept < n_samples:
        v = f + rng.standard_normal((2 * n_samples, f.size))
        v = v[v.argmax(1) == label]
        out.append(v)
        kept += len(v)
    return np.concatenate(out)[:n_samples]
