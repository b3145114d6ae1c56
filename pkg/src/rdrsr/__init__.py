"""Sequential recommender with a dynamic number of interest representations."""
from .config import RunConfig, load_config
from .model import RDRSR, Batch, Noise

__all__ = ["RDRSR", "Batch", "Noise", "RunConfig", "load_config"]
__version__ = "0.1.0"
