"""Exception types shared across the toolkit."""


class NumericFault(RuntimeError):
    """A non-finite value showed up where training math expected a finite one.

    Carries whatever partial run log existed when the fault was detected so
    callers can inspect the trajectory up to the failure.
    """

    def __init__(self, message, run_log=None):
        super().__init__(message)
        self.run_log = run_log


class UnsupportedFormat(ValueError):
    """Checkpoint or manifest file has an incompatible format version."""


class CheckpointParseError(ValueError):
    """Checkpoint file is corrupt or truncated; ``offset`` is where parsing died."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointNotFound(LookupError):
    """No checkpoint registered at the requested token position."""

    def __init__(self, tokens, available):
        nearest = ", ".join(str(t) for t in sorted(available)) or "none"
        super().__init__(
            f"no checkpoint at token position {tokens}; available positions: {nearest}"
        )
        self.tokens = tokens
        self.available = tuple(sorted(available))


class RunConflict(ValueError):
    """A run with the same id is already registered."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


class SingularFit(ValueError):
    """Curve fit is degenerate (e.g. all points share one abscissa)."""
