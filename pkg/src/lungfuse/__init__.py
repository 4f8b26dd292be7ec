"""Desk-scale multi-modal lung image pipeline.

Wavelet CT/PET fusion with rigid registration, a small learned PET
denoiser, tabular preprocessing with class rebalancing and boosted-tree
feature ranking, and a cross-validated multi-modal classifier, all
exercised end to end on synthetic phantoms.
"""

__version__ = "0.1.0"

from .errors import (
    LungFuseError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    NumericalError,
)

__all__ = [
    "LungFuseError",
    "ConfigError",
    "ContractError",
    "DataError",
    "FormatError",
    "NumericalError",
    "__version__",
]
