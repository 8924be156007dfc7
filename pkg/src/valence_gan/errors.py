"""Exception hierarchy shared across the toolkit."""


class ValenceGanError(Exception):
    """Base class for all toolkit errors."""


class GraphError(ValenceGanError):
    """Raised when a computation graph cannot be constructed (e.g. shape mismatch)."""


class NumericFault(ValenceGanError):
    """Raised when an operation produces a non-finite value."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ContractError(ValenceGanError):
    """Raised when a caller violates an operation's precondition."""


class ValidationError(ValenceGanError):
    """Raised on invalid user-supplied values (labels, configs loaded from files)."""


class IngestionError(ValenceGanError):
    """Raised when an input file does not match the expected format."""


class ProtocolError(ValenceGanError):
    """Raised when the evaluation protocol cannot be applied to the given corpus."""


class ConfigError(ValenceGanError):
    """Raised when a model or run configuration violates its allowed ranges."""
