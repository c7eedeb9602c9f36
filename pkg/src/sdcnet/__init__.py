"""Residual CNN denoising for low-dose CT perfusion, with bSVD perfusion maps."""

from .model import NetworkSpec, build_network, denoise, network_backward, network_forward, parameter_count
from .perfusion import Aif, DeconvolutionConfig, quantify_series

__all__ = [
    "Aif",
    "DeconvolutionConfig",
    "NetworkSpec",
    "build_network",
    "denoise",
    "network_backward",
    "network_forward",
    "parameter_count",
    "quantify_series",
]
__version__ = "0.1.0"
