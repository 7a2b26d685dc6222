"""Cross-subject EEG decoding of held index-finger position.

Library and command line tool covering the whole chain: synthetic data
generation, spatial and temporal filtering, band-power feature
extraction, robust normalization, random-forest classification with
leave-one-subject-out evaluation, and permutation-based feature
importance maps.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DegenerateDataError, PosdecError

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateDataError",
    "PosdecError",
    "__version__",
]
