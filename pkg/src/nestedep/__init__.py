"""Multiclass Gaussian-process classification with nested expectation propagation.

The multinomial probit likelihood is handled by an inner EP over the
augmented tilted distribution inside an outer EP over observations, keeping
all between-class posterior couplings at ``O((c+1) n^3)`` cost.  Laplace
(softmax, with the LA-TKP predictive correction) and a Gibbs sampler are
included as baselines and oracles.
"""

__version__ = "0.1.0"

from .kernel import Hyperparams, LabeledDataset, build_covariance, cross_covariance
from .inner_ep import SiteState, TiltedResult, tilted_moments
from .ep import EpOptions, EpResult, PosteriorState, log_marginal, run_ep, ep_evidence
from .predict import PredictiveDistribution, class_probabilities, latent_predict
from .laplace import LaplaceState, la_predict, la_tkp_predict, laplace_fit, newton_mode, softmax_probs
from .gibbs import GibbsChain, run_gibbs, sample_auxiliary, sample_latents
from .hyperopt import HyperPrior, objective, optimize, optimize_multistart

__all__ = [
    "Hyperparams", "LabeledDataset", "build_covariance", "cross_covariance",
    "SiteState", "TiltedResult", "tilted_moments",
    "EpOptions", "EpResult", "PosteriorState", "log_marginal", "run_ep", "ep_evidence",
    "PredictiveDistribution", "class_probabilities", "latent_predict",
    "LaplaceState", "la_predict", "la_tkp_predict", "laplace_fit", "newton_mode", "softmax_probs",
    "GibbsChain", "run_gibbs", "sample_auxiliary", "sample_latents",
    "HyperPrior", "objective", "optimize", "optimize_multistart",
]
