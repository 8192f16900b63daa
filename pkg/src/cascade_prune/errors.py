"""Exception hierarchy shared across the package."""


class CascadePruneError(Exception):
    """Base class for all errors raised by cascade_prune."""


class ConstructionError(CascadePruneError, ValueError):
    """Invalid model dimensions or an infeasible planted recipe."""


class CapacityError(CascadePruneError):
    """Sequence would exceed the model's ``max_seq_len``."""


class InvalidDirectiveError(CascadePruneError, ValueError):
    """Malformed pruning directive (empty kept set, bad fraction, bad layer)."""


class TraceError(CascadePruneError, ValueError):
    """Attention trace misuse: shape mismatch, empty accumulator, foreign trace."""


class RankingError(CascadePruneError, ValueError):
    pass


class ScoreError(CascadePruneError, ValueError):
    pass


class ConfigError(CascadePruneError, ValueError):
    """Incompatible model pair or invalid run configuration."""
