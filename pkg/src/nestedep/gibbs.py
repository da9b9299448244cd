"""Gibbs sampler for multinomial probit GP classification at fixed hyperparameters.

Auxiliary variables ``v_i ~ N(f_i, I)`` with ``y_i = argmax_k v_ik`` make
both conditionals tractable: ``v | f`` is a Gaussian truncated to a cone and
``f | v`` is the GP posterior under unit Gaussian noise, independently per
class.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_ndtr, ndtri_exp

from .kernel import build_covariance, cross_covariance, jittered

CONE_SCANS = 5
GH_NODES = 64
SLICE_MOVES = 3


def _upper_truncated(mu, bound, rng):
    """Draw ``N(mu, 1)`` truncated to ``x < bound`` by inversion in log space."""
    log_u = np.log(rng.random(np.shape(mu)))
    x = mu + ndtri_exp(log_u + log_ndtr(bound - mu))
    return np.minimum(x, np.nextafter(bound, -np.inf))


def _lower_truncated(mu, bound, rng):
    log_u = np.log(rng.random(np.shape(mu)))
    x = mu - ndtri_exp(log_u + log_ndtr(mu - bound))
    return np.maximum(x, np.nextafter(bound, np.inf))


def _cone_start(F, y):
    V = F.copy()
    rows = np.arange(y.size)
    others = V.copy()
    others[rows, y] = -np.inf
    top = others.max(1)
    V[rows, y] = np.where(V[rows, y] > top, V[rows, y], top + 1.0)
    return V


def sample_auxiliary_batch(F, y, rng, V=None, scans=CONE_SCANS):
    """Coordinate-Gibbs scans of ``v_i | f_i, y_i`` inside the cone, all ``i`` at once.

    ``V`` is the previous auxiliary state (must lie in the cone); it is
    initialised from ``F`` when omitted.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    y = np.asarray(y, dtype=int)
    n, c = F.shape
    rows = np.arange(n)
    mask = np.ones((n, c), dtype=bool)
    mask[rows, y] = False
    V = _cone_start(F, y) if V is None else np.array(V, dtype=float)
    for _ in range(scans):
        draw = _upper_truncated(F, V[rows, y][:, None], rng)
        V = np.where(mask, draw, V)
        top = np.where(mask, V, -np.inf).max(1)
        V[rows, y] = _lower_truncated(F[rows, y], top, rng)
    return V


def sample_auxiliary(f_i, y_i, rng, v_i=None, scans=CONE_SCANS):
    """One cone-truncated draw of ``v_i`` for a single observation."""
    V0 = None if v_i is None else np.asarray(v_i, dtype=float)[None]
    return sample_auxiliary_batch(np.asarray(f_i, dtype=float)[None], [y_i], rng, V0, scans)[0]


class LatentSampler:
    """Exact draws from ``p(f | v)`` for a shared class covariance ``K``.

    Uses ``f = f0 + K (K + I)^-1 (v - f0 - e)`` with ``f0 ~ N(0, K)`` and
    ``e ~ N(0, I)``, which needs only factorisations computed once.
    """

    def __init__(self, K):
        K = np.asarray(K, dtype=float)
        self.n = K.shape[0]
        self.L = np.linalg.cholesky(K)
        cf = cho_factor(K + np.eye(self.n), lower=True)
        self.G = cho_solve(cf, K).T           # K (K + I)^-1
        self.cond_cov = K - self.G @ K

    def mean(self, V):
        return self.G @ V

    def refresh_offset(self, F, V, rng):
        """Redraw the class-mean components of ``f`` and ``v``.

        The likelihood depends only on differences between classes, and with
        i.i.d. class priors and isotropic auxiliary noise the class means
        ``(f_bar, v_bar)`` are a posteriori independent of the rest with
        ``f_bar ~ N(0, K / c)`` and ``v_bar ~ N(f_bar, I / c)``.  Redrawing
        them exactly removes the slowest-mixing direction of the sampler.
        """
        c = F.shape[1]
        f_bar = self.L @ rng.standard_normal(self.n) / np.sqrt(c)
        v_bar = f_bar + rng.standard_normal(self.n) / np.sqrt(c)
        F = F - F.mean(1, keepdims=True) + f_bar[:, None]
        V = V - V.mean(1, keepdims=True) + v_bar[:, None]
        return F, V

    def slice_move(self, F, V, y, rng, max_shrink=60):
        """Elliptical slice move on the joint Gaussian prior of ``(f, v)``.

        The "likelihood" is the product of cone indicators, so any point on
        the ellipse with every ``v_i`` in its cone is acceptable.  Leaves the
        joint posterior invariant and makes prior-scale jumps that the
        conditional updates cannot.
        """
        n, c = F.shape
        Fp = self.L @ rng.standard_normal((n, c))
        Vp = Fp + rng.standard_normal((n, c))
        rows = np.arange(n)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        lo, hi = phi - 2.0 * np.pi, phi
        for _ in range(max_shrink):
            cs, sn = np.cos(phi), np.sin(phi)
            Vn = V * cs + Vp * sn
            others = Vn.copy()
            others[rows, y] = -np.inf
            if np.all(Vn[rows, y] > others.max(1)):
                return F * cs + Fp * sn, Vn
            if phi < 0:
                lo = phi
            else:
                hi = phi
            phi = rng.uniform(lo, hi)
        return F, V

    def __call__(self, V, rng):
        V = np.asarray(V, dtype=float)
        c = V.shape[1]
        f0 = self.L @ rng.standard_normal((self.n, c))
        e = rng.standard_normal((self.n, c))
        return f0 + self.G @ (V - f0 - e)


def sample_latents(V, K, rng):
    """Draw ``f | v`` (shape ``(n, c)``) for prior covariance ``K``."""
    return LatentSampler(K)(V, rng)


def probit_class_probs(F, nodes=GH_NODES):
    """Multinomial probit probabilities of latent vectors ``F[..., c]``.

    The one-dimensional integral over the auxiliary ``u ~ N(0, 1)`` is done
    by Gauss-Hermite quadrature.
    """
    F = np.asarray(F, dtype=float)
    c = F.shape[-1]
    u, w = hermegauss(nodes)
    w = w / np.sqrt(2.0 * np.pi)
    diff = F[..., :, None] - F[..., None, :]                 # f_k - f_j
    logs = log_ndtr(u + diff[..., None])                     # (..., c, c, Q)
    eye = np.eye(c, dtype=bool)[..., None]
    logs = np.where(eye, 0.0, logs).sum(-2)                  # (..., c, Q)
    return np.exp(logs) @ w


@dataclass
class GibbsChain:
    """Stored latent draws ``f_samples`` of shape ``(s, n, c)`` and summaries."""

    f_samples: np.ndarray
    seed: int
    burn_in: int
    thin: int
    mean: np.ndarray = None          # (n, c)
    cov: np.ndarray = None           # (n, c, c)
    train_probs: np.ndarray = None   # (n, c)
    test_probs: np.ndarray = None    # (m, c)
    test_probs_se: np.ndarray = None
    n_iterations: int = 0
    aux_draws: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.f_samples.shape[0]

    def split_half_z(self, n_batches=20):
        """Largest standardised difference between the two chain halves' means.

        Standard errors come from batch means, so autocorrelation is
        accounted for.
        """
        s = self.n_samples // 2
        halves = self.f_samples[:s], self.f_samples[s:2 * s]
        nb = max(2, min(n_batches, s))
        var = []
        for h in halves:
            b = h[: (s // nb) * nb].reshape(nb, s // nb, *h.shape[1:]).mean(1)
            var.append(b.var(0, ddof=1) / nb)
        se = np.sqrt(var[0] + var[1])
        d = np.abs(halves[0].mean(0) - halves[1].mean(0))
        return float(np.max(d / np.maximum(se, 1e-300)))

    def summary(self):
        out = {
            "seed": self.seed, "burn_in": self.burn_in, "thin": self.thin,
            "n_samples": self.n_samples, "iterations": self.n_iterations,
            "aux_draws": self.aux_draws,
            "posterior_mean": self.mean.tolist(),
            "posterior_var": np.diagonal(self.cov, axis1=1, axis2=2).tolist(),
            "train_probs": self.train_probs.tolist(),
        }
        if self.test_probs is not None:
            out["test_probs"] = self.test_probs.tolist()
        return out


def _predictive_draws(samples, K, Ks, kss, rng):
    """Draw ``f*`` given each stored ``f`` draw; returns ``(s, m, c)``."""
    cf = cho_factor(K, lower=True)
    A = cho_solve(cf, Ks)                         # K^-1 K*
    var = np.maximum(kss - np.einsum("nm,nm->m", Ks, A), 0.0)
    mean = np.einsum("nm,snc->smc", A, samples)
    return mean + np.sqrt(var)[None, :, None] * rng.standard_normal(mean.shape)


def run_gibbs(data, theta, n_samples=4000, burn_in=2000, thin=5, seed=0, Xstar=None):
    """Run one Gibbs chain at fixed ``theta``.

    Parameters
    ----------
    data : LabeledDataset
    theta : Hyperparams
    n_samples : int
        Number of stored draws (after thinning).
    burn_in, thin : int
    seed : int
    Xstar : ndarray, optional
        Test inputs for predictive probabilities.

    Returns
    -------
    GibbsChain
    """
    if n_samples < 1 or thin < 1 or burn_in < 0:
        raise ValueError("need n_samples >= 1, thin >= 1 and burn_in >= 0")
    rng = np.random.default_rng(seed)
    K = jittered(build_covariance(data.X, theta), theta)
    sampler = LatentSampler(K)
    y = data.y
    F = np.zeros((data.n, data.n_classes))
    V = None
    out = np.empty((n_samples, data.n, data.n_classes))
    total = burn_in + n_samples * thin
    kept = 0
    for it in range(total):
        V = sample_auxiliary_batch(F, y, rng, V)
        F = sampler(V, rng)
        F, V = sampler.refresh_offset(F, V, rng)
        for _ in range(SLICE_MOVES):
            F, V = sampler.slice_move(F, V, y, rng)
        if it >= burn_in and (it - burn_in) % thin == thin - 1:
            out[kept] = F
            kept += 1

    chain = GibbsChain(out, seed, burn_in, thin, n_iterations=total, aux_draws=total * CONE_SCANS)
    chain.mean = out.mean(0)
    centred = out - chain.mean
    chain.cov = np.einsum("snk,snl->nkl", centred, centred) / max(n_samples - 1, 1)
    idx = np.arange(data.n)
    chain.train_probs = _average_probs(out)[0]
    chain.extras["train_true_class_prob"] = chain.train_probs[idx, y].tolist()
    if Xstar is not None:
        chain.test_probs, chain.test_probs_se = chain_predict(chain, data.X, theta, Xstar)
    return chain


def _average_probs(draws, budget=2_000_000):
    """Mean and mean square of probit probabilities over draws ``(s, m, c)``."""
    s, m, c = draws.shape
    step = max(1, budget // (m * c * c * GH_NODES))
    total = np.zeros((m, c))
    total_sq = np.zeros((m, c))
    for s0 in range(0, s, step):
        p = probit_class_probs(draws[s0:s0 + step])
        total += p.sum(0)
        total_sq += (p * p).sum(0)
    return total / s, total_sq / s


def chain_predict(chain, X, theta, Xstar):
    """Predictive class probabilities at ``Xstar`` from a stored chain.

    A test latent is drawn conditional on each stored training draw and the
    probit likelihood is averaged over them.  Returns ``(probs, std_err)``.
    """
    Xstar = np.atleast_2d(Xstar)
    K = jittered(build_covariance(X, theta), theta)
    Ks = cross_covariance(X, Xstar, theta)
    rng = np.random.default_rng([chain.seed, 1])
    draws = _predictive_draws(chain.f_samples, K, Ks, theta.magnitude, rng)
    p, sq = _average_probs(draws)
    se = np.sqrt(np.maximum(sq - p * p, 0.0) / chain.n_samples)
    return p, se
