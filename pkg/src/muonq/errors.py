"""Exception types shared across the package."""


class MuonqError(Exception):
    """Base class for all muonq errors."""


class ShapeMismatchError(MuonqError):
    """Operands have incompatible shapes."""


class NonFiniteError(MuonqError):
    """Input contains NaN or Inf."""


class ZeroMatrixError(MuonqError):
    """Operation undefined for an all-zero matrix (e.g. polar factor)."""


class NonConvergenceError(MuonqError):
    """Iterative kernel failed to reach tolerance within its sweep budget."""


class ZeroReferenceError(MuonqError):
    """Relative error undefined: reference matrix has zero norm."""


class ZeroOperandError(MuonqError):
    """Cosine similarity undefined: one operand has zero norm."""


class CheckpointError(MuonqError):
    """Base class for checkpoint (de)serialization failures."""


class BadMagicError(CheckpointError):
    """File does not start with the MUQ1 magic."""


class VersionMismatchError(CheckpointError):
    """Checkpoint version is not supported by this reader."""


class TruncatedFileError(CheckpointError):
    """Checkpoint ended before all declared content was read."""
