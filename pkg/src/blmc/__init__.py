"""Bayesian linear model of coregionalization with NNGP factor priors for misaligned spatial data."""
from .geometry import LocationSet, NeighborGraph, build_neighbor_graph, order_locations
from .kernels import Kernel, correlation, correlation_matrix, effective_range
from .linalg import make_rng
from .model import Dataset, ModelConfig, Priors, SigmaMode
from .nngp import NNGPFactor, build_factor, build_prediction_weights
from .predict import latent_summary, predict, predict_factors, predict_responses
from .sampler import PosteriorSamples, ValidationError, run_mcmc

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Kernel", "LocationSet", "ModelConfig", "NNGPFactor", "NeighborGraph",
    "PosteriorSamples", "Priors", "SigmaMode", "ValidationError", "build_factor",
    "build_neighbor_graph", "build_prediction_weights", "correlation", "correlation_matrix",
    "effective_range", "latent_summary", "make_rng", "order_locations", "predict",
    "predict_factors", "predict_responses", "run_mcmc",
]
