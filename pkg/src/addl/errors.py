class FormatError(ValueError):
    """Malformed or corrupt stream. ``offset`` is the byte position, when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ModelMismatchError(ValueError):
    """Stream was produced with different weights than the ones loaded."""
