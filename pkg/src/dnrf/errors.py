"""Exception types raised across the package."""


class DnrfError(Exception):
    """Base class; ``kind`` is the short name printed by the CLI."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class DegenerateTriangle(DnrfError, ValueError):
    pass


class EmptyMesh(DnrfError, ValueError):
    pass


class ZeroDirection(DnrfError, ValueError):
    pass


class ShapeMismatch(DnrfError, ValueError):
    pass


class TapeMismatch(DnrfError, ValueError):
    pass


class LengthMismatch(DnrfError, ValueError):
    pass


class PixelOutOfBounds(DnrfError, IndexError):
    pass


class NonFiniteGradient(DnrfError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NonFiniteLoss(DnrfError, FloatingPointError):
    pass


class ManifestError(DnrfError, ValueError):
    pass


class TopologyMismatch(DnrfError, ValueError):
    pass


class VersionMismatch(DnrfError, ValueError):
    pass


class CorruptPayload(DnrfError, ValueError):
    pass


class IoFailure(DnrfError, OSError):
    pass
