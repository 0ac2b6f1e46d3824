"""Background subtraction with a patch-pair CNN over an adaptive background model."""

from .errors import CsegError, DivergenceError, FormatError, InputError, NotReadyError, StateError

__version__ = "0.1.0"

__all__ = ["CsegError", "DivergenceError", "FormatError", "InputError", "NotReadyError", "StateError",
           "__version__"]
