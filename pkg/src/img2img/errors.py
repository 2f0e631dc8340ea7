"""Exception hierarchy shared by every subsystem.

The CLI prints ``error: <ClassName>: <message>`` on a single line, so class
names double as machine-parseable error identifiers.
"""


class Img2ImgError(Exception):
    """Base class for all package errors."""


class ShapeError(Img2ImgError, ValueError):
    pass


class DomainError(Img2ImgError, ValueError):
    """Input outside an operation's mathematical domain (e.g. log of <= 0)."""


class NonFiniteError(Img2ImgError, FloatingPointError):
    pass


class GraphError(Img2ImgError, RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, consumed graph, ...)."""


class NonDeterministicError(Img2ImgError, RuntimeError):
    pass


class ArchParseError(Img2ImgError, ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (token {position})"
        super().__init__(message)


class ConfigError(Img2ImgError, ValueError):
    pass


class DataError(Img2ImgError, IOError):
    pass


class ImageDecodeError(DataError):
    pass


class UnsupportedDepthError(ImageDecodeError):
    pass


class CheckpointError(Img2ImgError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
