from .errors import (ArgumentError, ConfigurationError, DataError, DomainError, FormatError, HeurVidQAError,
                     NumericError, ShapeError, StateError)
