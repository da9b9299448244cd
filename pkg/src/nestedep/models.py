"""Uniform fit/predict interface over the inference methods."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .ep import EPError, EpOptions, run_ep
from .gibbs import chain_predict, run_gibbs
from .hyperopt import default_inits, optimize_multistart
from .inner_ep import InnerEPError
from .kernel import Hyperparams
from .laplace import la_predict, la_tkp_predict, laplace_fit
from .predict import predict as ep_predict

logger = logging.getLogger(__name__)

METHODS = ("ep", "iep", "la", "la-tkp", "gibbs")
#: Which optimised hyperparameters each method uses.
THETA_SOURCE = {"ep": "ep", "iep": "iep", "la": "la", "la-tkp": "la", "gibbs": "ep", "uniform": None}

INFERENCE_ERRORS = (EPError, InnerEPError, np.linalg.LinAlgError, FloatingPointError)


@dataclass
class Settings:
    """Knobs shared by all commands."""

    damping: float = 0.8
    tol: float = 1e-6
    max_outer: int = 500
    seed: int = 0
    gibbs_samples: int = 4000
    gibbs_burn_in: int = 2000
    gibbs_thin: int = 5
    max_evals: int = 200

    def ep_options(self, method):
        return EpOptions(mode="iep" if method == "iep" else "full", damping=self.damping,
                         outer_tol=self.tol, max_outer=self.max_outer)


@dataclass
class FittedModel:
    """A trained approximation able to predict class probabilities."""

    method: str
    theta: Hyperparams
    data: object
    settings: Settings
    state: object = None
    log_evidence: float = None
    converged: bool = True
    info: dict = field(default_factory=dict)

    def predict(self, Xstar):
        """``(probs (m, c), flagged (m,))`` at test inputs."""
        Xstar = np.atleast_2d(Xstar)
        m, c = Xstar.shape[0], self.data.n_classes
        flagged = np.zeros(m, dtype=bool)
        if self.method == "uniform":
            return np.full((m, c), 1.0 / c), flagged
        if self.method in ("ep", "iep"):
            pd = ep_predict(self.state.state, Xstar, self.theta, self.data.X, seed=self.settings.seed)
            return pd.probs, pd.fallback | (not self.converged)
        if self.method == "la":
            p = la_predict(self.state, Xstar, self.theta, self.data.X, seed=self.settings.seed)
            return p, flagged | (not self.converged)
        if self.method == "la-tkp":
            r = la_tkp_predict(self.data, self.theta, Xstar, base=self.state, seed=self.settings.seed)
            return r.probs, r.fallback | (not self.converged)
        if self.method == "gibbs":
            return chain_predict(self.state, self.data.X, self.theta, Xstar)[0], flagged
        raise ValueError(f"unknown method {self.method!r}")

    def trace_rows(self):
        if self.method not in ("ep", "iep") or self.state is None:
            return []
        return [{"sweep": k + 1, "log_z": r.log_z, "max_delta": r.max_delta, "skipped": r.skipped,
                 "inner_sweeps": r.inner_sweeps, "damping": r.damping}
                for k, r in enumerate(self.state.trace)]

    def summary(self):
        out = {"theta": self.theta.to_vector().tolist() if self.theta else None,
               "log_evidence": self.log_evidence, "converged": self.converged}
        out.update(self.info)
        return out


def fit(method, data, theta, settings=None, init=None):
    """Fit ``method`` at fixed hyperparameters ``theta``.

    ``init`` is an optional earlier fit of the same method on the same data,
    used to warm-start EP or Newton iterations.
    """
    settings = settings or Settings()
    if method == "uniform":
        return FittedModel(method, theta, data, settings, log_evidence=None)
    if method in ("ep", "iep"):
        prev = init.state if init is not None else None
        res = run_ep(data, theta, settings.ep_options(method), init=prev)
        return FittedModel(method, theta, data, settings, res, res.log_z, res.converged,
                           {"sweeps": res.n_sweeps, "inner_sweeps": res.inner_sweeps})
    if method in ("la", "la-tkp"):
        st = laplace_fit(data, theta, init.state if init is not None else None)
        return FittedModel(method, theta, data, settings, st, st.log_marginal, st.converged,
                           {"newton_iterations": st.n_iter, "residual": st.residual})
    if method == "gibbs":
        ch = run_gibbs(data, theta, settings.gibbs_samples, settings.gibbs_burn_in,
                       settings.gibbs_thin, settings.seed)
        return FittedModel(method, theta, data, settings, ch, None, True,
                           {"samples": ch.n_samples, "split_half_z": ch.split_half_z()})
    raise ValueError(f"unknown method {method!r}")


def select_hyperparams(method, data, settings=None, inits=None):
    """Type-II MAP hyperparameters for ``method`` (None for the uniform baseline)."""
    settings = settings or Settings()
    source = THETA_SOURCE[method]
    if source is None:
        return None, []
    opts = EpOptions(mode="iep" if source == "iep" else "full", damping=settings.damping,
                     outer_tol=min(settings.tol, 1e-9),
                     max_outer=max(settings.max_outer, 5000 if source == "iep" else 1000))
    res = optimize_multistart(data, source, inits or default_inits(data), settings.max_evals,
                              ep_options=None if source == "la" else opts)
    return res.theta, res.trace
