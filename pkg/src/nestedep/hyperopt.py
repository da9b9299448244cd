"""Type-II MAP estimation of the covariance hyperparameters.

The objective is the approximate log evidence plus independent
half-Student-t log priors on the magnitude ``sigma`` and each lengthscale,
both on their natural (non-log) scale.  Optimisation runs in log-parameter
space, so the log-Jacobian of ``phi -> exp(phi)`` is part of the prior term.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .ep import EPError, EpOptions, ep_evidence
from .inner_ep import InnerEPError
from .kernel import Hyperparams, median_distance
from .laplace import laplace_evidence

logger = logging.getLogger(__name__)

METHODS = ("ep", "iep", "la")


@dataclass(frozen=True)
class HyperPrior:
    """Half-Student-t prior with ``dof`` degrees of freedom.

    The scale is set from the variance of the underlying Student-t,
    ``var = scale^2 * dof / (dof - 2)``; with ``dof = 4`` and variance 100
    this gives ``scale^2 = 50``.
    """

    dof: float = 4.0
    variance: float = 100.0

    @property
    def scale2(self):
        return self.variance * (self.dof - 2.0) / self.dof

    def log_density(self, x):
        """Log density of the half-t at ``x > 0`` (elementwise)."""
        nu, s2 = self.dof, self.scale2
        x = np.asarray(x, dtype=float)
        const = np.log(2.0) + gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi * s2)
        return const - 0.5 * (nu + 1) * np.log1p(x * x / (nu * s2))

    def dlog_density(self, x):
        nu, s2 = self.dof, self.scale2
        return -(nu + 1) * x / (nu * s2 + x * x)

    def log_prior(self, vec):
        """Log prior of a log-parameter vector ``[log sigma^2, log l_1, ...]``.

        Returns ``(value, gradient)`` with respect to the log-parameters.
        """
        vec = np.asarray(vec, dtype=float)
        sigma = np.exp(0.5 * vec[0])
        ls = np.exp(vec[1:])
        value = self.log_density(sigma) + (np.log(sigma) - np.log(2.0))
        value += np.sum(self.log_density(ls) + vec[1:])
        grad = np.empty_like(vec)
        grad[0] = 0.5 * sigma * self.dlog_density(sigma) + 0.5
        grad[1:] = ls * self.dlog_density(ls) + 1.0
        return float(value), grad


@dataclass
class Evaluation:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    ok: bool
    message: str = ""

    def as_dict(self):
        return {"theta": self.theta.tolist(), "value": self.value if self.ok else None,
                "grad_inf": float(np.max(np.abs(self.grad))) if self.ok else None,
                "ok": self.ok, "message": self.message}


@dataclass
class Objective:
    """Log posterior of the hyperparameters with warm-started inference.

    Calling the object returns ``(value, grad)``; a failed inference yields
    ``(-inf, 0)`` and is recorded in ``trace``.
    """

    data: object
    method: str = "ep"
    prior: HyperPrior = field(default_factory=HyperPrior)
    ep_options: EpOptions = None
    warm_start: bool = True
    trace: list = field(default_factory=list)
    last: object = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ep_options is None:
            mode = "iep" if self.method == "iep" else "full"
            self.ep_options = EpOptions(mode=mode, outer_tol=1e-9, max_outer=5000 if mode == "iep" else 1000)

    def evidence(self, theta):
        init = self.last if self.warm_start else None
        if self.method == "la":
            return laplace_evidence(self.data, theta, init)
        return ep_evidence(self.data, theta, self.ep_options, init)

    def __call__(self, vec):
        vec = np.array(vec, dtype=float)
        try:
            theta = Hyperparams.from_vector(vec)
            log_ev, grad, result = self.evidence(theta)
            if not np.isfinite(log_ev) or not np.all(np.isfinite(grad)):
                raise FloatingPointError("non-finite evidence")
        except (EPError, InnerEPError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            logger.warning("inference failed at %s: %s", vec, exc)
            self.trace.append(Evaluation(vec, -np.inf, np.zeros_like(vec), False, str(exc)))
            return -np.inf, np.zeros_like(vec)
        self.last = result
        lp, lp_grad = self.prior.log_prior(vec)
        value, g = log_ev + lp, grad + lp_grad
        self.trace.append(Evaluation(vec, float(value), g, True))
        return float(value), g


def objective(theta_vec, data, method="ep", prior=None):
    """``(value, gradient)`` of the log hyperparameter posterior at ``theta_vec``."""
    obj = Objective(data, method, prior or HyperPrior(), warm_start=False)
    return obj(theta_vec)


@dataclass
class OptimizeResult:
    theta: Hyperparams
    value: float
    grad: np.ndarray
    trace: list
    n_evals: int
    message: str


_FAIL = 1e100


def optimize(data, init, method="ep", max_evals=200, gtol=1e-5, prior=None, ep_options=None):
    """Quasi-Newton ascent of the log hyperparameter posterior.

    Uses L-BFGS-B on the negated objective.  The best point seen is
    returned, so the result is never worse than ``init``.
    """
    obj = Objective(data, method, prior or HyperPrior(), ep_options)

    def fun(vec):
        value, grad = obj(vec)
        if not np.isfinite(value):
            return _FAIL, np.zeros_like(vec)
        return -value, -grad

    x0 = init.to_vector()
    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   options={"maxfun": max_evals, "maxiter": max_evals, "gtol": gtol, "ftol": 1e-15})
    good = [e for e in obj.trace if e.ok]
    if not good:
        raise RuntimeError(f"all {len(obj.trace)} evaluations failed: {obj.trace[-1].message}")
    best = max(good, key=lambda e: e.value)
    return OptimizeResult(Hyperparams.from_vector(best.theta), best.value, best.grad,
                          [e.as_dict() for e in obj.trace], len(obj.trace), str(res.message))


def default_inits(data, ard=True):
    """Starting points ``log sigma^2 in {0, 1, 2}`` at the median-distance lengthscale."""
    log_l = np.log(median_distance(data.X))
    ls = np.full(data.d if ard else 1, log_l)
    return [Hyperparams(s, ls) for s in (0.0, 1.0, 2.0)]


def optimize_multistart(data, method="ep", inits=None, max_evals=200, **kw):
    """Run :func:`optimize` from several starts and keep the best."""
    inits = inits or default_inits(data)
    best = None
    for th in inits:
        try:
            res = optimize(data, th, method, max_evals, **kw)
        except RuntimeError as exc:
            logger.warning("start %s failed: %s", th.to_vector(), exc)
            continue
        if best is None or res.value > best.value:
            best = res
    if best is None:
        raise RuntimeError("hyperparameter optimisation failed from every start")
    return best
