"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, schema, or hyperparameter."""


class ShapeError(ValueError):
    """Array shapes do not line up."""


class StateError(RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. backward before forward)."""


class DeltaError(KeyError):
    """A rule delta targets a rule id that is not in the rule set."""


class UsageError(RuntimeError):
    """Caller misuse: empty batch, empty log, missing checkpoint."""
