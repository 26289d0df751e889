class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class DomainError(ValueError):
    """A special function was evaluated outside its domain."""
