"""Exception hierarchy shared by all cseg modules."""


class CsegError(Exception):
    """Base class for every error raised deliberately by cseg."""

    exit_code = 2


class InputError(CsegError, ValueError):
    """Bad caller input: wrong shapes, missing files, empty datasets."""

    exit_code = 1


class FormatError(InputError):
    """A serialized file (model, checkpoint, store) is malformed."""


class StateError(CsegError):
    """An object is used before it is ready (e.g. untrained model)."""


class NotReadyError(StateError):
    """A temporal buffer does not yet hold enough frames."""


class DivergenceError(CsegError):
    """Training produced a non-finite loss."""
