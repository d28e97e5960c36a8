class KRError(Exception):
    """Base class for all library errors."""


class DomainError(KRError, ValueError):
    """An argument lies outside the domain of an operation (bad index, undefined value, ...)."""


class PreconditionError(KRError, ValueError):
    """A documented precondition of an operation does not hold."""


class PremiseError(KRError):
    """The non-tightness premise of the witness construction failed within the probe horizon.

    ``cover`` holds the finite atom set that captured the sequence.
    """

    def __init__(self, message, cover=()):
        super().__init__(message)
        self.cover = list(cover)
