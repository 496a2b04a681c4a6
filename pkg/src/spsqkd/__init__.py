"""Single-photon-source BB84 analysis: time tags, g2, QBER, GLLP key rates
and temporal-filter optimization."""

from .errors import (
    ConfigurationError,
    InsufficientDataError,
    NoKeyError,
    ParseError,
    QkdError,
    UndefinedValueError,
    ValidationError,
)
from .timetag import ChannelId, PulseClock, TagStream, TimeTag

__version__ = "0.1.0"

__all__ = [
    "ChannelId",
    "ConfigurationError",
    "InsufficientDataError",
    "NoKeyError",
    "ParseError",
    "PulseClock",
    "QkdError",
    "TagStream",
    "TimeTag",
    "UndefinedValueError",
    "ValidationError",
    "__version__",
]
