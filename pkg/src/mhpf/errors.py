"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class GenerationError(RuntimeError):
    """Raised when a procedural generator exhausts its retry budget."""
