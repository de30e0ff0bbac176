"""Rising/sinking bubble simulations and a Koopman autoencoder trained on them."""

from .errors import (
    ConfigError, DataError, KoopBubbleError, NumericalError,
)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "KoopBubbleError", "NumericalError", "__version__"]
