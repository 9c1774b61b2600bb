"""Self-learning subspace diffusion for hyperspectral and multispectral image fusion."""

from .config import RunConfig, load_config
from .sampler import SamplerConfig, run_fusion

__all__ = ["RunConfig", "SamplerConfig", "load_config", "run_fusion"]
__version__ = "0.1.0"
