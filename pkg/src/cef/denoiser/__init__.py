from .analytic import (
    AnalyticBackend,
    AnalyticGaussianModel,
    CirculantCovariance,
    DiagonalCovariance,
    SingularOperatorError,
    ZeroBackend,
    analytic_posterior_mean,
)
from .core import denoise, denoise_batch, lead_time_scale
from .embedding import EmbeddingConfig, fourier_features, fourier_features_grad
from .network import Architecture, ConvResNet, TrainingFault

__all__ = [
    "AnalyticBackend",
    "AnalyticGaussianModel",
    "Architecture",
    "CirculantCovariance",
    "ConvResNet",
    "DiagonalCovariance",
    "EmbeddingConfig",
    "SingularOperatorError",
    "TrainingFault",
    "ZeroBackend",
    "analytic_posterior_mean",
    "denoise",
    "denoise_batch",
    "fourier_features",
    "fourier_features_grad",
    "lead_time_scale",
]
