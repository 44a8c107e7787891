"""Exception types shared across the package."""


class S2KDError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(S2KDError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(S2KDError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(S2KDError, RuntimeError):
    """A caller violated an API precondition (e.g. backward from a non-scalar)."""


class InputError(S2KDError, ValueError):
    """Model inputs do not match the configured shapes or schema."""


class FormatError(S2KDError, ValueError):
    """A binary file is malformed.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ChecksumError(FormatError):
    pass
