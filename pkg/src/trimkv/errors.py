"""Exception types shared across the package."""


class TrimKVError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(TrimKVError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(TrimKVError, ValueError):
    """A softmax row has no unmasked entries."""


class ProbeError(TrimKVError, ArithmeticError):
    """A finite-difference probe produced a non-finite value."""


class NumericError(TrimKVError, ArithmeticError):
    """Non-finite values entered a kernel that requires finite inputs."""


class DomainError(TrimKVError, ValueError):
    """A value lies outside its required open/closed interval."""


class OrderingError(TrimKVError, ValueError):
    """Index arguments violate their required ordering."""


class ConfigError(TrimKVError, ValueError):
    """Invalid or missing configuration."""


class GenerationError(TrimKVError, ValueError):
    """A task generator cannot satisfy its constraints."""


class EncodingError(TrimKVError, ValueError):
    """Input text cannot be decoded in the requested mode."""


class NonFiniteGradError(TrimKVError, ArithmeticError):
    """An optimizer step received a NaN/Inf gradient."""


class DivergenceError(TrimKVError, RuntimeError):
    """Training loss exceeded the divergence threshold."""


class CheckpointError(TrimKVError, IOError):
    """Base class for checkpoint load failures."""


class MagicMismatchError(CheckpointError):
    """Checkpoint file does not start with the expected magic bytes."""


class TruncationError(CheckpointError):
    """Checkpoint payload is shorter than its manifest claims."""


class ManifestError(CheckpointError):
    """Checkpoint manifest entry is inconsistent with its payload."""


class StateError(TrimKVError, RuntimeError):
    """A cache operation was called in an invalid state."""


class SizeGuardError(TrimKVError, ValueError):
    """An exhaustive routine was asked to run past its size guard."""
