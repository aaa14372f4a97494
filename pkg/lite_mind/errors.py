"""Exception types shared across the package"""


class LiteMindError(Exception):
    """Base error; exit_code is what the CLI returns for it"""
    exit_code = 1


class ConfigError(LiteMindError):
    exit_code = 2


class DataError(LiteMindError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    """Tensor or vector extents do not line up"""


class TensorFileError(DataError):
    """Malformed TensorFile container"""


class BadMagicError(TensorFileError):
    pass


class UnsupportedVersionError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class TruncatedTensorError(TensorFileError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class NumericalError(LiteMindError):
    """Non-finite value where a finite one is required"""
    exit_code = 4


class GraphError(LiteMindError):
    """Gradients requested from a loss with no recorded graph"""
    exit_code = 4


class VerificationError(LiteMindError):
    exit_code = 4


class RemoteError(LiteMindError):
    exit_code = 5


class RemoteTimeoutError(RemoteError):
    pass


class RemoteHTTPError(RemoteError):
    def __init__(self, status: int, body: str):
        super().__init__(f"KNN endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


class RemoteProtocolError(RemoteError):
    def __init__(self, message: str, offset: int = -1):
        super().__init__(message if offset < 0 else f"{message} (at offset {offset})")
        self.offset = offset


class KnnQueryError(LiteMindError, ValueError):
    """Invalid KNN query rejected before it is sent"""
    exit_code = 2
