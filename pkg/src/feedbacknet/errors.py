"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed binary or text input. ``offset`` is the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(ValueError):
    pass


class TaxonomyError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
