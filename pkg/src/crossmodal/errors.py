"""Exception hierarchy shared across the package."""


class CrossmodalError(Exception):
    """Base class for all errors raised by this package."""


class CorpusFormatError(CrossmodalError):
    """A corpus file is malformed or violates a data invariant."""


class VocabularyError(CrossmodalError):
    """Vocabulary construction failed (e.g. no terms survive)."""


class EmptySequenceError(CrossmodalError):
    """A caption has no in-vocabulary tokens; the sample should be skipped."""


class ZeroNormError(CrossmodalError):
    """An embedding has zero norm and cannot be cosine-scored."""


class NonFiniteGradientError(CrossmodalError):
    """A gradient contained NaN or inf; the epoch must abort."""


class CheckpointError(CrossmodalError):
    """Base class for checkpoint load/save failures."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written with an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """The checkpoint file is truncated or fails its integrity check."""


class ConfigError(CrossmodalError):
    """A run configuration value is missing or invalid."""
