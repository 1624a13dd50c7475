"""Exception types shared across the package.

The CLI maps ``InputError`` and ``ConfigError`` to exit code 2 and every other
``OvsegError`` to exit code 1.
"""


class OvsegError(Exception):
    pass


class DimensionError(OvsegError, ValueError):
    """Shapes do not agree with an operation's contract."""


class ContractError(OvsegError, ValueError):
    """A documented precondition was violated (zero norm, bad range, ...)."""


class ConfigError(OvsegError, ValueError):
    pass


class InputError(OvsegError, ValueError):
    pass


class RasterParseError(InputError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
