"""Low-light enhancement by recursive specularity factorization."""

from .admm import FactorParams, SolverDivergence, solve_factor
from .factorize import FactorStack, ParamVector, factorize
from .fusion import FusionConfig, enhance
from .image import Image
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FactorParams", "FactorStack", "FusionConfig", "Image", "ParamVector", "SolverDivergence",
    "TrainConfig", "enhance", "factorize", "solve_factor", "train",
]
