"""Exception hierarchy shared by all simulator modules."""


class FedDlpError(Exception):
    """Base class for simulator errors."""


class ShapeError(FedDlpError):
    """Operands have incompatible or malformed dimensions."""


class DegenerateInputError(FedDlpError):
    """An input is numerically degenerate (zero norm, non-finite entries)."""


class ConfigError(FedDlpError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(FedDlpError):
    """A caller violated an operation's precondition."""


class FormatError(FedDlpError):
    """A binary file or byte stream does not match its declared layout."""


class AggregationError(FedDlpError):
    """Adapter updates are structurally incompatible with aggregation."""


class EvaluationError(FedDlpError):
    """A client cannot be evaluated (e.g. empty test shard)."""
