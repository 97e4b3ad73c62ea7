"""Exception types shared across the package."""


class NeuronFlowError(Exception):
    """Base class for all package errors."""


class ConstraintError(NeuronFlowError, ValueError):
    """An input violates a documented precondition."""


class ConfigError(NeuronFlowError):
    """A configuration file is missing, malformed, or fails schema checks."""


class InvariantError(NeuronFlowError, AssertionError):
    """An internal invariant was violated. Never swallowed."""


class PartitionError(InvariantError):
    """Hot and cold partitions of an FFN evaluation overlap."""


class CacheRejection(NeuronFlowError, ValueError):
    """An entry is larger than the budget of the region it targets."""


class PlanError(NeuronFlowError, KeyError):
    """An execution plan lacks an entry for a requested batch size."""
