"""Exception hierarchy shared across the toolkit."""


class KopaError(Exception):
    """Base class for all toolkit errors."""


class ParseError(KopaError):
    """A data file could not be parsed; message carries path and line number."""


class DataError(KopaError):
    """Structurally valid input that violates a semantic requirement."""


class ConfigError(KopaError):
    """Invalid configuration (bad dimensions, bad config file, bad flag combination)."""


class FormatError(KopaError):
    """A binary artifact (embedding file, adapter file, checkpoint) is malformed."""


class CorruptionExhaustedError(KopaError):
    """Every candidate replacement for a corrupted triple is already a known triple."""


class DegenerateSplitError(KopaError):
    """An inductive split removed every training triple."""


class FitError(KopaError):
    """Threshold fitting received degenerate input (a single class)."""


class TrainingDivergenceError(KopaError):
    """Training produced a non-finite loss; message names the epoch."""
