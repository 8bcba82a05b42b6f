"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violated a documented precondition (shapes, ranges, emptiness)."""


class DivergenceError(RuntimeError):
    """An iterative routine produced non-finite values and was aborted."""
