"""Outer (nested) EP for multinomial probit GP classification.

Site precisions have the form ``Pi_i = diag(pi_i) - pi_i pi_i^T / (1^T pi_i)``
which lets the posterior be represented through ``c`` class-wise ``n x n``
Cholesky factors plus one extra ``n x n`` factor, i.e. ``O((c+1) n^3)``.

Array conventions: per-observation quantities are ``(n, c)`` arrays; the
stacked ``cn`` vectors of the class-major ordering are their transposes.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .inner_ep import InnerEPError, SiteState, tilted_moments_batch
from .kernel import build_covariance, covariance_grads, jittered

logger = logging.getLogger(__name__)


class EPError(np.linalg.LinAlgError):
    """A factorisation in the posterior refresh failed."""


class StaleStateError(RuntimeError):
    """Posterior state does not correspond to the supplied sites."""


# ---------------------------------------------------------------------------
# Site structure
# ---------------------------------------------------------------------------

def _others(label, c):
    return np.array([j for j in range(c) if j != label], dtype=int)


def site_precision(tau, label):
    """Structured site precision of one observation.

    Returns ``(pi, Pi)`` with ``pi = E_{-y} tau + e_y`` and
    ``Pi = diag(pi) - pi pi^T / (1^T pi)``.
    """
    tau = np.asarray(tau, dtype=float)
    c = tau.size + 1
    pi = np.zeros(c)
    pi[_others(label, c)] = tau
    pi[label] = 1.0
    total = pi.sum()
    assert total > 0
    return pi, np.diag(pi) - np.outer(pi, pi) / total


def site_location(tau, nu, label):
    """Site location ``a pi - E_{-y} nu`` with ``a = 1^T nu / 1^T pi``."""
    tau = np.asarray(tau, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c = tau.size + 1
    pi, _ = site_precision(tau, label)
    out = pi * (nu.sum() / pi.sum())
    out[_others(label, c)] -= nu
    return out


def structured_sites(sites, labels):
    """Stacked ``(pi, nu_tilde)`` arrays, each ``(n, c)``, from inner sites."""
    labels = np.asarray(labels)
    n, c1 = sites.tau.shape
    c = c1 + 1
    pi = np.ones((n, c))
    loc = np.zeros((n, c))
    for i, y in enumerate(labels):
        o = _others(y, c)
        pi[i, o] = sites.tau[i]
        loc[i, o] = -sites.nu[i]
    a = sites.nu.sum(1) / pi.sum(1)
    loc += a[:, None] * pi
    return pi, loc


def precision_blocks(pi, coupled=True):
    """Per-observation ``c x c`` site precisions (``Pi_i`` or ``diag(pi_i)``)."""
    P = np.einsum("ik,kl->ikl", pi, np.eye(pi.shape[1]))
    if coupled:
        P -= pi[:, :, None] * pi[:, None, :] / pi.sum(1)[:, None, None]
    return P


# ---------------------------------------------------------------------------
# Posterior representation
# ---------------------------------------------------------------------------

@dataclass
class PosteriorState:
    """Gaussian posterior for GP sites with (optionally coupled) structure.

    ``coupled=False`` is the class-independent case: ``D`` holds diagonal
    site precisions and the extra ``P`` factor is dropped.
    """

    K: list
    pi: np.ndarray
    nu: np.ndarray
    coupled: bool
    B: np.ndarray            # (c, n, n) blocks of D^1/2 A^-1 D^1/2
    chol_A: list
    chol_P: np.ndarray
    alpha: np.ndarray        # (n, c) = (I - M K) nu, so mean = K alpha
    mean: np.ndarray         # (n, c)
    cov: np.ndarray          # (n, c, c)
    logdet: float            # log |I + K T|

    @property
    def n(self):
        return self.pi.shape[0]

    @property
    def n_classes(self):
        return self.pi.shape[1]

    def apply_M(self, V):
        """``M V`` for a class-blocked right-hand side ``V`` of shape (c, n, m)."""
        U = self.B @ V
        if not self.coupled:
            return U
        W = cho_solve((self.chol_P, True), U.sum(0))
        return U - self.B @ W[None]

    def M_diag_blocks(self):
        """Class-diagonal blocks ``M^{kk}`` (c, n, n)."""
        if not self.coupled:
            return self.B.copy()
        G = solve_triangular(self.chol_P, self.B.reshape(-1, self.n).T, lower=True)
        G = G.T.reshape(self.n_classes, self.n, self.n)
        return self.B - G @ np.swapaxes(G, 1, 2)


def _as_blocks(K_blocks, c):
    if isinstance(K_blocks, np.ndarray) and K_blocks.ndim == 2:
        return [K_blocks] * c
    K_blocks = list(K_blocks)
    if len(K_blocks) != c:
        raise ValueError(f"expected {c} covariance blocks, got {len(K_blocks)}")
    return K_blocks


def refresh_posterior(K_blocks, pi, nu, coupled=True):
    """Posterior moments from site parameters.

    Parameters
    ----------
    K_blocks : ndarray or list of ndarray
        Jittered class covariance(s); a single ``n x n`` array is shared.
    pi, nu : ndarray, shape (n, c)
        Site precision vectors and site locations.
    coupled : bool
        Use the structured precisions ``Pi_i``; otherwise ``diag(pi_i)``.
    """
    pi = np.asarray(pi, dtype=float)
    nu = np.asarray(nu, dtype=float)
    n, c = pi.shape
    if np.any(pi < 0):
        raise ValueError("site precisions must be non-negative")
    Ks = _as_blocks(K_blocks, c)
    eye = np.eye(n)
    sq = np.sqrt(pi)
    chol_A, B, KBK_diag = [], np.empty((c, n, n)), np.empty((n, c))
    E = np.empty((c, n, n))
    logdet = 0.0
    for k in range(c):
        s = sq[:, k]
        A = eye + s[:, None] * Ks[k] * s[None, :]
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise EPError(f"Cholesky of class block {k} of A failed")
        chol_A.append(L)
        logdet += 2.0 * np.log(np.diag(L)).sum()
        Q = solve_triangular(L, np.diag(s), lower=True)
        B[k] = Q.T @ Q
        E[k] = Ks[k] @ B[k]
        KBK_diag[:, k] = np.einsum("ij,ji->i", E[k], Ks[k])

    chol_P = None
    if coupled:
        P = B.sum(0)
        try:
            chol_P = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise EPError("Cholesky of P failed")
        logdet += 2.0 * np.log(np.diag(chol_P)).sum() - np.log(pi.sum(1)).sum()

    cov = np.zeros((n, c, c))
    for k in range(c):
        cov[:, k, k] = np.diag(Ks[k]) - KBK_diag[:, k]
    if coupled:
        rhs = np.concatenate([E[k].T for k in range(c)], axis=1)
        V = solve_triangular(chol_P, rhs, lower=True).reshape(n, c, n)
        cov += np.einsum("mki,mli->ikl", V, V)

    state = PosteriorState(Ks, pi, nu, coupled, B, chol_A, chol_P, None, None, cov, logdet)
    Knu = np.stack([Ks[k] @ nu[:, k] for k in range(c)])       # (c, n)
    alpha = nu.T - state.apply_M(Knu[:, :, None])[:, :, 0]
    state.alpha = alpha.T.copy()
    state.mean = np.stack([Ks[k] @ alpha[k] for k in range(c)], axis=1)
    return state


# ---------------------------------------------------------------------------
# Cavities and the marginal likelihood
# ---------------------------------------------------------------------------

@dataclass
class Cavities:
    mean: np.ndarray      # (n, c)
    cov: np.ndarray       # (n, c, c)
    prec: np.ndarray      # (n, c, c)
    shift: np.ndarray     # (n, c) natural location
    ok: np.ndarray        # (n,) bool


def compute_cavities(state):
    """Remove each site from its marginal in natural parameters."""
    n, c = state.pi.shape
    marg_prec = np.linalg.inv(state.cov)
    marg_prec = 0.5 * (marg_prec + np.swapaxes(marg_prec, 1, 2))
    prec = marg_prec - precision_blocks(state.pi, state.coupled)
    shift = np.einsum("ikl,il->ik", marg_prec, state.mean) - state.nu
    ok = np.linalg.eigvalsh(prec).min(1) > 0
    cov = np.full((n, c, c), np.nan)
    mean = np.full((n, c), np.nan)
    if np.any(ok):
        cov[ok] = np.linalg.inv(prec[ok])
        cov[ok] = 0.5 * (cov[ok] + np.swapaxes(cov[ok], 1, 2))
        mean[ok] = np.einsum("ikl,il->ik", cov[ok], shift[ok])
    return Cavities(mean, cov, prec, shift, ok)


def log_marginal(state, sites, cavities, labels, site_log_z=None):
    """EP estimate of ``log p(y | X, theta)``.

    ``site_log_z`` (per observation) may be supplied when the inner
    normalisers are already known for these cavities and sites.
    """
    labels = np.asarray(labels)
    if state.coupled:
        pi, loc = structured_sites(sites, labels)
        if not (np.allclose(pi, state.pi, rtol=0, atol=1e-12) and np.allclose(loc, state.nu, rtol=0, atol=1e-12)):
            raise StaleStateError("posterior state was built from different sites")
    if not np.all(cavities.ok):
        return np.nan
    if site_log_z is None:
        site_log_z = tilted_moments_batch(cavities.mean, cavities.cov, labels, sites, sweeps=0)[0]

    Lc = np.linalg.cholesky(cavities.cov)
    cav_terms = np.einsum("ik,ik->i", cavities.mean, cavities.shift) \
        + 2.0 * np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum(1)
    Lm = np.linalg.cholesky(state.cov)
    w = np.linalg.solve(state.cov, state.mean[:, :, None])[:, :, 0]
    marg_terms = np.einsum("ik,ik->i", state.mean, w) \
        + 2.0 * np.log(np.diagonal(Lm, axis1=1, axis2=2)).sum(1)

    return float(0.5 * np.sum(state.nu * state.mean) - 0.5 * state.logdet
                 + np.sum(site_log_z) + 0.5 * cav_terms.sum() - 0.5 * marg_terms.sum())


def log_marginal_grad(state, X, theta, converged=True):
    """Gradient of ``log Z_EP`` with respect to the log-hyperparameters.

    Only the explicit dependence through ``K`` is differentiated; site and
    cavity parameters are held fixed, which is exact at an EP fixed point.
    """
    if not converged:
        logger.warning("evidence gradient requested for a non-converged EP state")
    Msum = state.M_diag_blocks().sum(0)
    outer = state.alpha @ state.alpha.T
    R = 0.5 * (outer - Msum)
    return np.array([np.sum(R * dK) for dK in covariance_grads(X, theta)])


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

@dataclass
class EpOptions:
    """Outer-loop settings.

    ``mode`` is ``"full"`` (all between-class couplings) or ``"iep"``;
    ``inner_mode`` is ``"incremental"`` (one inner sweep per outer sweep) or
    ``"standard"`` (inner EP to convergence).
    """

    mode: str = "full"
    inner_mode: str = "incremental"
    damping: float = 0.8
    outer_tol: float = 1e-6
    max_outer: int = 100
    auto_damping: bool = True

    def __post_init__(self):
        if self.mode not in ("full", "iep"):
            raise ValueError(f"unknown EP mode {self.mode!r}")
        if self.inner_mode not in ("incremental", "standard"):
            raise ValueError(f"unknown inner mode {self.inner_mode!r}")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class SweepRecord:
    log_z: float
    max_delta: float
    skipped: int
    inner_sweeps: int
    damping: float


@dataclass
class EpResult:
    state: PosteriorState
    sites: SiteState
    cavities: Cavities
    log_z: float
    converged: bool
    labels: np.ndarray
    mode: str
    trace: list = field(default_factory=list)

    @property
    def n_sweeps(self):
        return len(self.trace)

    @property
    def inner_sweeps(self):
        return sum(r.inner_sweeps for r in self.trace)

    def site_arrays(self):
        return self.state.pi, self.state.nu


def _oscillating(history, tol):
    if len(history) < 5:
        return False
    d = np.diff(history[-5:])
    return bool(np.all(np.abs(d) > tol) and np.all(d[1:] * d[:-1] < 0))


def run_ep(data, theta, opts=None, init=None, K=None):
    """Nested EP with parallel outer updates.

    Parameters
    ----------
    data : LabeledDataset
    theta : Hyperparams
    opts : EpOptions, optional
    init : EpResult, optional
        Previous result used as a warm start (same data, same mode).
    K : ndarray, optional
        Precomputed jittered prior covariance.
    """
    opts = opts or EpOptions()
    if K is None:
        K = jittered(build_covariance(data.X, theta), theta)
    y = data.y
    n, c = data.n, data.n_classes
    coupled = opts.mode == "full"

    if init is not None:
        sites = init.sites.copy()
        pi, loc = init.state.pi.copy(), init.state.nu.copy()
    else:
        sites = SiteState.zeros(c, n)
        if coupled:
            pi, loc = structured_sites(sites, y)
        else:
            pi, loc = np.zeros((n, c)), np.zeros((n, c))

    state = refresh_posterior(K, pi, loc, coupled)
    cav = compute_cavities(state)
    log_z = log_marginal(state, sites, cav, y)
    history = [log_z]
    trace = []
    damping = opts.damping
    converged = False
    for sweep in range(opts.max_outer):
        ok = cav.ok
        idx = np.flatnonzero(ok)
        new_sites = sites.copy()
        n_inner = 0
        if idx.size:
            inner_damping = damping if (coupled and opts.inner_mode == "incremental") else 1.0
            n_sw = 1 if opts.inner_mode == "incremental" else None
            _, mu_hat, cov_hat, upd, counts, _ = tilted_moments_batch(
                cav.mean[idx], cav.cov[idx], y[idx], sites[idx],
                damping=inner_damping, sweeps=n_sw, index=idx)
            n_inner = int(counts.sum())
            if coupled and opts.inner_mode == "standard":
                upd.tau = sites.tau[idx] + damping * (upd.tau - sites.tau[idx])
                upd.nu = sites.nu[idx] + damping * (upd.nu - sites.nu[idx])
            new_sites.tau[idx] = upd.tau
            new_sites.nu[idx] = upd.nu

        if coupled:
            new_pi, new_loc = structured_sites(new_sites, y)
        else:
            new_pi, new_loc = pi.copy(), loc.copy()
            if idx.size:
                var_hat = np.diagonal(cov_hat, axis1=1, axis2=2)
                cav_var = np.diagonal(cav.cov[idx], axis1=1, axis2=2)
                t_target = np.maximum(1.0 / var_hat - 1.0 / cav_var, 0.0)
                l_target = mu_hat / var_hat - cav.mean[idx] / cav_var
                new_pi[idx] = np.maximum(pi[idx] + damping * (t_target - pi[idx]), 0.0)
                new_loc[idx] = loc[idx] + damping * (l_target - loc[idx])

        max_delta = float(max(np.abs(new_pi - pi).max(), np.abs(new_loc - loc).max()))
        sites, pi, loc = new_sites, new_pi, new_loc
        state = refresh_posterior(K, pi, loc, coupled)
        cav = compute_cavities(state)
        new_log_z = log_marginal(state, sites, cav, y)
        skipped = int((~ok).sum())
        trace.append(SweepRecord(new_log_z, max_delta, skipped, n_inner, damping))
        d_log_z = abs(new_log_z - log_z) if np.isfinite(new_log_z) else np.inf
        log_z = new_log_z
        history.append(log_z)
        if skipped:
            logger.debug("sweep %d: skipped %d sites with invalid cavities", sweep, skipped)
        if max_delta < opts.outer_tol and d_log_z < opts.outer_tol and np.all(cav.ok):
            converged = True
            break
        if opts.auto_damping and damping > 0.5 and _oscillating(history, opts.outer_tol):
            logger.info("log Z oscillating; reducing damping to 0.5")
            damping = 0.5

    if not converged:
        logger.warning("EP did not converge in %d sweeps", opts.max_outer)
    return EpResult(state, sites, cav, log_z, converged, y, opts.mode, trace)


def ep_evidence(data, theta, opts=None, init=None):
    """``(log Z_EP, gradient, result)`` at ``theta``."""
    K0 = build_covariance(data.X, theta)
    res = run_ep(data, theta, opts, init, K=jittered(K0, theta))
    grad = log_marginal_grad(res.state, data.X, theta, res.converged)
    return res.log_z, grad, res
