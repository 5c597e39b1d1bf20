"""Reference-based colorization of grayscale photos by feature-distribution alignment."""
from .features import ExtractorConfig, Extractors
from .metrics import MetricConfig
from .losses import LossWeights
from .optimizer import RunConfig, RunReport, run

__all__ = ["ExtractorConfig", "Extractors", "LossWeights", "MetricConfig", "RunConfig", "RunReport", "run"]
__version__ = "0.1.0"
