"""Lung sound classification: ICBHI ingestion, log-mel features, device
spectrum correction, augmentation, StochNorm and co-tuning fine-tuning."""

from .errors import ConfigError, DataError, DivergenceDetected, LungSoundError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DivergenceDetected", "LungSoundError", "__version__"]
