from __future__ import annotations


class MonoBev3DError(Exception):
    """Common base so callers (the CLI) can tell library failures apart."""


# Invalid input: same family as the ValueError raised everywhere else.


class OutOfRange(MonoBev3DError, ValueError):
    pass


class DegenerateYaw(MonoBev3DError, ValueError):
    pass


class BehindCamera(MonoBev3DError, ValueError):
    pass


class FullyOutsideImage(MonoBev3DError, ValueError):
    pass


class InvalidBox(MonoBev3DError, ValueError):
    pass


class MalformedLine(MonoBev3DError, ValueError):
    pass


class InvalidBbox(MonoBev3DError, ValueError):
    pass


class MissingP2(MonoBev3DError, ValueError):
    pass


class MalformedMatrix(MonoBev3DError, ValueError):
    pass


class OutOfImage(MonoBev3DError, ValueError):
    pass


class ShapeMismatch(MonoBev3DError, ValueError):
    pass


class VersionMismatch(MonoBev3DError, ValueError):
    pass


class UnknownBranch(MonoBev3DError, ValueError):
    pass


class EmptyDataset(MonoBev3DError, ValueError):
    pass


class FrameMismatch(MonoBev3DError, ValueError):
    pass


class LengthMismatch(MonoBev3DError, ValueError):
    pass


class UnsupportedFormat(MonoBev3DError, ValueError):
    pass


# Invalid state.


class NoForwardCache(MonoBev3DError, RuntimeError):
    pass


class CannotPlace(MonoBev3DError, RuntimeError):
    pass


class FreezeViolation(MonoBev3DError, RuntimeError):
    pass
