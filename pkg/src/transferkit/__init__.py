"""From-scratch CNN toolkit for transfer learning by last-layer retraining."""

from .errors import (
    ContractError,
    DataError,
    DecodeError,
    NumericError,
    ShapeError,
    StaleCacheError,
    TransferKitError,
    UsageError,
)

__version__ = "0.1.0"
