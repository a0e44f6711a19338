"""tacuv: tactile unification across hand embodiments.

Projects glove and robot-hand pressure readings onto a shared hand-surface
UV map and trains dual encoders into one domain-invariant latent space.
"""

__version__ = "0.1.0"

from . import engine
from .errors import (DataError, EngineError, FitError, FormatError, ShapeError,
                     TacuvError, UrdfError)
from .uvmap import UVMap

__all__ = [
    "engine", "UVMap", "TacuvError", "EngineError", "ShapeError", "DataError",
    "FormatError", "UrdfError", "FitError", "__version__",
]
