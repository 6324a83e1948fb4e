"""Exception types shared across the package.

Every contract violation raises a ContractError subclass so the CLI can map
them to exit code 1, distinct from argparse usage errors (exit code 2).
"""


class ContractError(ValueError):
    """An input violated a documented precondition or invariant."""


class ShapeError(ContractError):
    """Tensor or grid dimensions are inconsistent with the operation."""


class FormatError(ContractError):
    """A file or payload does not match the expected external format."""


class ProtocolError(ContractError):
    """A stream event is illegal in the scheduler's current state."""


class DivergenceError(ContractError):
    """An optimisation run produced a non-finite loss."""
