"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class ParseError(ValueError):
    """A serialized stream is malformed.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
