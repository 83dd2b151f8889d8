"""Exception types. Each carries the CLI exit code it maps to."""


class FvbError(Exception):
    exit_code = 1


class UsageError(FvbError, ValueError):
    """Bad arguments, unknown names, invalid configs, unreadable inputs."""

    exit_code = 2


class FormatError(FvbError, ValueError):
    """Malformed files: bad magic, truncated payloads, CSV schema violations."""

    exit_code = 3


class ShapeError(FvbError, ValueError):
    """Shape, divisibility or resolution violations."""

    exit_code = 4


class StateError(FvbError):
    """Operation not valid for the object's current form (e.g. folding twice)."""

    exit_code = 5
