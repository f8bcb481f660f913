"""Exception hierarchy shared across the package."""


class SceneMotionError(Exception):
    """Base class for all package errors."""


class ParseError(SceneMotionError):
    """Malformed input text or file (carries file/line context when known)."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class ValidationError(SceneMotionError):
    """Input violates a declared precondition or invariant."""


class EmptyInputError(SceneMotionError):
    """An operation that needs at least one element got none."""


class ProtocolError(SceneMotionError):
    """A chat response did not follow the expected answer grammar."""


class GroundingImpossibleError(SceneMotionError):
    """The scene contains no object of the requested target category."""


class UnsatisfiableError(SceneMotionError):
    """No object satisfies the parsed relation constraints."""


class DegenerateRotationError(SceneMotionError):
    """6D rotation input cannot be orthonormalized."""


class NumericError(SceneMotionError):
    """Non-finite values encountered in a numeric computation."""
