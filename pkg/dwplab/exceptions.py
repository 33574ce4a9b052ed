"""
Error taxonomy for the DWP laboratory.

Every failure the package raises on purpose derives from `LabError`, so the
command-line front end can turn it into a machine-readable error record.
Subclasses carry the context a caller needs (JSON path, row, epoch, ...)
as attributes and expose it through `context()`.
"""


class LabError(Exception):
    """Base class for all deliberate failures."""

    def context(self):
        """Return extra fields for the JSON error record."""
        return {}


class RejectedInputError(LabError, ValueError):
    """Input has the wrong shape, is empty, or holds non-finite values."""


class ConfigError(LabError, ValueError):
    """
    Configuration value is unknown, mistyped, or violates an invariant.

    Attributes:
        path: dotted JSON path of the offending value ('' when not tied to one)
    """

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)

    def context(self):
        return {"path": self.path}


class ParseError(LabError, ValueError):
    """A binary or text container could not be decoded."""


class IdxMagicError(ParseError):
    """IDX header does not carry an expected magic number."""


class IdxLengthError(ParseError):
    """IDX payload length disagrees with the declared dimensions."""


class CifarLengthError(ParseError):
    """CIFAR-10 blob is not a whole number of records."""


class CifarLabelError(ParseError):
    """CIFAR-10 record carries a label outside 0..9."""


class TargetFileError(ParseError):
    """Target assignment CSV is malformed (header, column count, integers)."""


class CheckpointError(ParseError):
    """Base class for container decoding failures."""


class BadMagicError(CheckpointError):
    """Container does not start with the expected magic bytes."""


class VersionMismatchError(CheckpointError):
    """Container was written by an unsupported format version."""


class TruncatedBlobError(CheckpointError):
    """Container ends before the bytes its manifest declares."""


class ManifestMismatchError(CheckpointError):
    """Manifest entries disagree with each other or with the blob section."""


class ValidationError(LabError, ValueError):
    """
    A parsed record violates a domain invariant.

    Attributes:
        row: 1-based data row index within the source file, or None
    """

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)

    def context(self):
        return {"row": self.row}


class TrainingError(LabError, RuntimeError):
    """
    Training diverged.

    Attributes:
        epoch: zero-based epoch in which the loss stopped being finite
    """

    def __init__(self, message, epoch):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")

    def context(self):
        return {"epoch": self.epoch}


class AttackError(LabError, RuntimeError):
    """
    An attack iteration produced a non-finite gradient.

    Attributes:
        iteration: zero-based iteration index
        model_index: index of the ensemble member that produced it
    """

    def __init__(self, message, iteration, model_index):
        self.iteration = iteration
        self.model_index = model_index
        super().__init__(f"iteration {iteration}, model {model_index}: {message}")

    def context(self):
        return {"iteration": self.iteration, "model_index": self.model_index}


class MissingArtifactError(LabError, FileNotFoundError):
    """A checkpoint or dataset file required by a command does not exist."""

    def __init__(self, message, path=""):
        self.path = str(path)
        super().__init__(message)

    def context(self):
        return {"path": self.path}
