"""Squared-exponential covariance with per-dimension lengthscales."""

from dataclasses import dataclass, field

import numpy as np

#: Relative diagonal jitter, scaled by the magnitude sigma^2.
JITTER = 1e-6


@dataclass(frozen=True)
class Hyperparams:
    """Log-magnitude and log-lengthscale(s) of the SE covariance.

    A single lengthscale is shared by all input dimensions; otherwise one
    lengthscale per dimension (ARD).
    """

    log_magnitude: float
    log_lengthscales: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_magnitude", float(self.log_magnitude))
        if ls.ndim != 1 or ls.size == 0:
            raise ValueError("log_lengthscales must be a non-empty vector")
        if not (np.isfinite(self.log_magnitude) and np.all(np.isfinite(ls))):
            raise ValueError("hyperparameters must be finite")

    @property
    def magnitude(self):
        return np.exp(self.log_magnitude)

    @property
    def n_params(self):
        return 1 + self.log_lengthscales.size

    def to_vector(self):
        return np.concatenate([[self.log_magnitude], self.log_lengthscales])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1:].copy())

    def lengthscales(self, d):
        ls = np.exp(self.log_lengthscales)
        if ls.size == 1:
            return np.full(d, ls[0])
        if ls.size != d:
            raise ValueError(f"got {ls.size} lengthscales for {d} input dimensions")
        return ls


@dataclass
class LabeledDataset:
    """Covariates ``X`` (n x d) with integer class labels.

    Labels are stored zero-based (``0..c-1``); ``classes`` keeps the
    original label names in the same order.
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: int = None
    classes: list = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=int).ravel()
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y disagree on the number of observations")
        if self.y.size < 1:
            raise ValueError("dataset is empty")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("covariates contain non-finite values")
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError("class label out of range")
        if self.classes is None:
            self.classes = [str(k + 1) for k in range(self.n_classes)]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx):
        return LabeledDataset(self.X[idx], self.y[idx], self.n_classes, self.classes)


def _scaled_sqdist(X1, X2, ls):
    A = X1 / ls
    B = X2 / ls
    sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(sq, 0.0)


def build_covariance(X, theta):
    """Prior covariance matrix ``K`` for inputs ``X`` (no jitter)."""
    X = np.atleast_2d(X)
    ls = theta.lengthscales(X.shape[1])
    K = theta.magnitude * np.exp(-0.5 * _scaled_sqdist(X, X, ls))
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, theta.magnitude)
    if not np.all(np.isfinite(K)):
        raise FloatingPointError("covariance overflow; check hyperparameters")
    return K


def cross_covariance(X, Xstar, theta):
    """Covariance between training inputs ``X`` and test inputs ``Xstar``."""
    X = np.atleast_2d(X)
    Xstar = np.atleast_2d(Xstar)
    if X.shape[1] != Xstar.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Xstar.shape[1]}")
    ls = theta.lengthscales(X.shape[1])
    Ks = theta.magnitude * np.exp(-0.5 * _scaled_sqdist(X, Xstar, ls))
    if not np.all(np.isfinite(Ks)):
        raise FloatingPointError("covariance overflow; check hyperparameters")
    return Ks


def jittered(K, theta):
    """``K + eps * sigma^2 * I``, applied right before factorization."""
    return K + JITTER * theta.magnitude * np.eye(K.shape[0])


def covariance_grad(X, theta, which, K=None):
    """Derivative of ``K`` with respect to log-parameter ``which``.

    Index 0 is log sigma^2; index ``1 + k`` is the k'th log-lengthscale.
    With a shared lengthscale there is exactly one lengthscale index.
    """
    X = np.atleast_2d(X)
    if not 0 <= which < theta.n_params:
        raise IndexError(f"parameter index {which} out of range")
    if K is None:
        K = build_covariance(X, theta)
    if which == 0:
        return K.copy()
    ls = theta.lengthscales(X.shape[1])
    if theta.log_lengthscales.size == 1:
        sq = _scaled_sqdist(X, X, ls)
    else:
        k = which - 1
        diff = X[:, k][:, None] - X[:, k][None, :]
        sq = diff**2 / ls[k] ** 2
    return K * sq


def covariance_grads(X, theta, K=None):
    """All log-parameter derivatives of the jittered covariance."""
    if K is None:
        K = build_covariance(X, theta)
    grads = [covariance_grad(X, theta, j, K) for j in range(theta.n_params)]
    grads[0] = jittered(grads[0], theta)
    return grads


def median_distance(X):
    """Median pairwise Euclidean distance; 1.0 for degenerate inputs."""
    X = np.atleast_2d(X)
    if X.shape[0] < 2:
        return 1.0
    sq = _scaled_sqdist(X, X, np.ones(X.shape[1]))
    iu = np.triu_indices(X.shape[0], 1)
    med = float(np.median(np.sqrt(sq[iu])))
    return med if med > 0 else 1.0
