"""Lightweight blind super-resolution with implicit degradation representations."""
from .config import RunConfig, load_config
from .degradation import DegradationSpec, degrade
from .drp import PCABasis, build_drp, fit_pca_basis
from .network import LightBSR

__version__ = "0.1.0"
__all__ = ["DegradationSpec", "LightBSR", "PCABasis", "RunConfig", "build_drp", "degrade", "fit_pca_basis", "load_config"]
