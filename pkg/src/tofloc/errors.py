class ToflocError(Exception):
    """Base class for all errors raised by tofloc."""


class FormatError(ToflocError, ValueError):
    """A file on disk does not follow the expected format."""


class DegenerateError(ToflocError, ValueError):
    """Input geometry is too degenerate for the requested fit."""


class ConsensusError(ToflocError):
    """RANSAC never reached the required inlier fraction."""

    def __init__(self, message, best_fraction=0.0):
        super().__init__(message)
        self.best_fraction = best_fraction


class PipelineError(ToflocError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.detail = message
