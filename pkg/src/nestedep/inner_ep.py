"""Inner EP for the tilted distribution of one multinomial probit term.

The auxiliary variable ``u`` of the multinomial probit is kept explicit,
so the tilted distribution of ``w = [f, u]`` is a Gaussian times ``c - 1``
probit factors ``Phi(w^T z_j)`` with ``z_j = [e_y - e_j, 1]``.  Each factor
gets a scalar Gaussian site ``(tau_j, nu_j)`` in natural form, fitted with
the usual rank-1 EP updates.  Everything here is vectorised over a leading
batch axis so the outer loop can process all observations at once.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

#: Inner convergence when running "until convergence".
INNER_TOL = 1e-8
INNER_MAX_SWEEPS = 50


class InnerEPError(np.linalg.LinAlgError):
    """Tilted covariance lost positive definiteness."""


@dataclass
class SiteState:
    """Inner site parameters for one or many observations.

    ``tau`` and ``nu`` have shape ``(c-1,)`` for a single observation or
    ``(n, c-1)`` for a stack; column ``j`` belongs to the j'th class other
    than the label, in ascending class order.  Zeros mean "not yet fitted".
    """

    tau: np.ndarray
    nu: np.ndarray

    @classmethod
    def zeros(cls, n_classes, n=None):
        shape = (n_classes - 1,) if n is None else (n, n_classes - 1)
        return cls(np.zeros(shape), np.zeros(shape))

    def __getitem__(self, idx):
        return SiteState(self.tau[idx], self.nu[idx])

    def copy(self):
        return SiteState(self.tau.copy(), self.nu.copy())


@dataclass
class TiltedResult:
    """EP estimate of the normaliser and moments of a tilted distribution."""

    log_z: float
    mean: np.ndarray
    cov: np.ndarray
    sweeps: int = 0
    skipped: int = 0


def log_ndtr_ratio(z):
    """``log(N(z) / Phi(z))`` without underflow for very negative ``z``."""
    return -0.5 * np.square(z) - _LOG_SQRT_2PI - log_ndtr(z)


def probit_site_moments(m, v):
    """Moments of ``Phi(x) N(x | m, v)``.

    Returns ``(log_Z, mean, var)``.  Works elementwise on arrays.
    """
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise ValueError("cavity variance must be positive")
    s = np.sqrt(1.0 + v)
    z = m / s
    log_z = log_ndtr(z)
    rho = np.exp(log_ndtr_ratio(z)) / s
    gamma = rho * rho + z * rho / s
    return log_z, m + rho * v, v - v * v * gamma


def _projections(labels, c):
    """Columns ``z_j = [e_y - e_j, 1]`` for ``j != y`` (ascending j)."""
    labels = np.asarray(labels)
    B = labels.size
    Z = np.zeros((B, c + 1, c - 1))
    rows = np.arange(B)
    for b, y in enumerate(labels):
        others = [j for j in range(c) if j != y]
        Z[b, y, :] = 1.0
        Z[b, others, np.arange(c - 1)] = -1.0
    Z[rows, c, :] = 1.0
    return Z


def augment(mean, cov, labels):
    """Augmented prior ``N(w | [mu, 0], blockdiag(Sigma, 1))`` and projections."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    B, c = mean.shape
    m_w = np.zeros((B, c + 1))
    m_w[:, :c] = mean
    S_w = np.zeros((B, c + 1, c + 1))
    S_w[:, :c, :c] = cov
    S_w[:, c, c] = 1.0
    return m_w, S_w, _projections(labels, c)


def _posterior(m_w, S_w, Z, tau, nu):
    """Moments of the Gaussian ``q(w)`` given the sites, via Woodbury."""
    c1 = tau.shape[1]
    s = np.sqrt(tau)
    SZ = S_w @ Z                                   # (B, c+1, c-1)
    C = np.swapaxes(Z, 1, 2) @ SZ                   # projected prior cov
    g = np.einsum("bkj,bk->bj", Z, m_w)             # projected prior mean
    Bm = np.eye(c1) + s[:, :, None] * C * s[:, None, :]
    V = SZ * s[:, None, :]
    BinvVt = np.linalg.solve(Bm, np.swapaxes(V, 1, 2))
    Sq = S_w - V @ BinvVt
    corr = np.linalg.solve(Bm, (s * g)[:, :, None])[:, :, 0]
    mq = m_w - np.einsum("bkj,bj->bk", V, corr) + np.einsum("bkl,bl->bk", Sq, np.einsum("bkj,bj->bk", Z, nu))
    return mq, 0.5 * (Sq + np.swapaxes(Sq, 1, 2))


def _sweep(mq, Sq, Z, tau, nu, damping, active):
    """One pass over the probit sites; updates arrays in place.

    Returns (max |delta|, skipped counts) per batch member.
    """
    B, c1 = tau.shape
    max_delta = np.zeros(B)
    skipped = np.zeros(B, dtype=int)
    for j in range(c1):
        zj = Z[:, :, j]
        theta = np.einsum("bkl,bl->bk", Sq, zj)
        v = np.einsum("bk,bk->b", zj, theta)
        m = np.einsum("bk,bk->b", zj, mq)
        prec_cav = 1.0 / v - tau[:, j]
        ok = active & (prec_cav > 0) & np.isfinite(prec_cav)
        skipped += active & ~ok
        if not np.any(ok):
            continue
        v_cav = np.where(ok, 1.0 / np.where(ok, prec_cav, 1.0), 1.0)
        m_cav = v_cav * (m / v - nu[:, j])
        _, m_hat, v_hat = probit_site_moments(m_cav, v_cav)
        d_tau = damping * (1.0 / v_hat - 1.0 / v)
        d_nu = damping * (m_hat / v_hat - m / v)
        d_tau = np.maximum(d_tau, -tau[:, j])
        d_tau = np.where(ok, d_tau, 0.0)
        d_nu = np.where(ok, d_nu, 0.0)
        tau[:, j] += d_tau
        nu[:, j] += d_nu
        denom = 1.0 + d_tau * v
        Sq -= (d_tau / denom)[:, None, None] * theta[:, :, None] * theta[:, None, :]
        mq += ((d_nu - d_tau * m) / denom)[:, None] * theta
        max_delta = np.maximum(max_delta, np.maximum(np.abs(d_tau), np.abs(d_nu)))
    return max_delta, skipped


def _log_z(m_w, S_w, Z, tau, nu, mq, Sq):
    """EP estimate of ``log Z`` for the current sites.

    Site normalisers are set so that each site reproduces the exact probit
    normaliser against its current cavity; the remaining Gaussian integral
    is done in the (c-1)-dimensional projected space.
    """
    Zt = np.swapaxes(Z, 1, 2)
    v = np.einsum("bkj,bkl,blj->bj", Z, Sq, Z)
    m = np.einsum("bkj,bk->bj", Z, mq)
    prec_cav = 1.0 / v - tau
    if np.any(prec_cav <= 0):
        raise InnerEPError("negative cavity variance while assembling log Z")
    v_cav = 1.0 / prec_cav
    m_cav = v_cav * (m / v - nu)
    log_zhat, _, _ = probit_site_moments(m_cav, v_cav)
    site_terms = log_zhat - 0.5 * np.log(v / v_cav) - 0.5 * m * m / v + 0.5 * m_cav * m_cav / v_cav

    C = Zt @ S_w @ Z
    g = np.einsum("bkj,bk->bj", Z, m_w)
    s = np.sqrt(tau)
    c1 = tau.shape[1]
    Bm = np.eye(c1) + s[:, :, None] * C * s[:, None, :]
    _, logdet_B = np.linalg.slogdet(Bm)
    Cinv_g = np.linalg.solve(C, g[:, :, None])[:, :, 0]
    quad = np.einsum("bj,bj->b", m - g, Cinv_g) + np.einsum("bj,bj->b", m, nu)
    return site_terms.sum(1) + 0.5 * quad - 0.5 * logdet_B


def tilted_moments_batch(mean, cov, labels, site=None, damping=1.0, sweeps=1,
                         tol=INNER_TOL, max_sweeps=INNER_MAX_SWEEPS, index=None):
    """Batched inner EP.

    ``sweeps=None`` runs each member until its largest site change falls
    below ``tol`` (at most ``max_sweeps``).  ``sweeps=0`` only evaluates the
    approximation implied by ``site``.

    Returns ``(log_z (B,), mean (B, c), cov (B, c, c), site, n_sweeps (B,),
    skipped (B,))``.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    B, c = mean.shape
    cov = np.asarray(cov, dtype=float).reshape(B, c, c)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if site is None:
        site = SiteState.zeros(c, B)
    tau = np.array(site.tau, dtype=float).reshape(B, c - 1)
    nu = np.array(site.nu, dtype=float).reshape(B, c - 1)

    m_w, S_w, Z = augment(mean, cov, labels)
    mq, Sq = _posterior(m_w, S_w, Z, tau, nu)
    n_sweeps = np.zeros(B, dtype=int)
    skipped = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    limit = max_sweeps if sweeps is None else sweeps
    for _ in range(limit):
        if not np.any(active):
            break
        delta, skip = _sweep(mq, Sq, Z, tau, nu, damping, active)
        n_sweeps += active
        skipped += skip
        if sweeps is None:
            active &= delta >= tol

    # refresh from the sites to shed rank-1 round-off
    mq, Sq = _posterior(m_w, S_w, Z, tau, nu)
    mu_hat = mq[:, :c]
    cov_hat = Sq[:, :c, :c]
    try:
        np.linalg.cholesky(cov_hat)
    except np.linalg.LinAlgError:
        bad = [b for b in range(B) if np.any(np.linalg.eigvalsh(cov_hat[b]) <= 0)]
        where = [index[b] if index is not None else b for b in bad]
        raise InnerEPError(f"tilted covariance not positive definite for observation(s) {where}")
    log_z = _log_z(m_w, S_w, Z, tau, nu, mq, Sq)
    return log_z, mu_hat, cov_hat, SiteState(tau, nu), n_sweeps, skipped


def tilted_moments(cavity_mean, cavity_cov, label, site=None, damping=1.0, sweeps=None,
                   tol=INNER_TOL, max_sweeps=INNER_MAX_SWEEPS):
    """Normaliser, mean and covariance of one tilted distribution.

    Parameters
    ----------
    cavity_mean, cavity_cov : array_like
        Cavity Gaussian over the ``c`` latent values of one observation.
    label : int
        Observed class (zero-based).
    site : SiteState, optional
        Warm-start site parameters; zeros when omitted.
    damping : float
        Damping factor in (0, 1] applied to every site update.
    sweeps : int or None
        Number of passes over the sites; ``None`` iterates to convergence.

    Returns
    -------
    TiltedResult, SiteState
    """
    mean = np.asarray(cavity_mean, dtype=float)
    c = mean.size
    if site is not None:
        site = SiteState(np.asarray(site.tau, float)[None], np.asarray(site.nu, float)[None])
    log_z, mu, cov, new_site, n_sw, skip = tilted_moments_batch(
        mean[None], np.asarray(cavity_cov, float).reshape(1, c, c), [label], site,
        damping, sweeps, tol, max_sweeps)
    res = TiltedResult(float(log_z[0]), mu[0], cov[0], int(n_sw[0]), int(skip[0]))
    return res, new_site[0]

