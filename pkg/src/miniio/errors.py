"""Exception hierarchy shared across the toolkit."""


class MiniIOError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MiniIOError):
    """Invalid or inconsistent engine/workload configuration."""


class OpenError(MiniIOError):
    """Session could not be opened (bad dir, inconsistent definitions, bind failure)."""


class SelectionError(MiniIOError):
    """Selection violates a variable's global shape."""


class StepOrderError(MiniIOError):
    """put() called for a step other than the session's current step."""


class IncompleteStep(MiniIOError):
    """A writer rank's fragment never arrived for a step."""


class DuplicateBlock(MiniIOError):
    """Two blocks for the same (variable, writer rank) in one step."""


class ParseError(MiniIOError):
    """Malformed index line.  ``pos`` is the byte position of the failure."""

    def __init__(self, msg, pos=0):
        super().__init__(msg)
        self.pos = pos


class ShapeError(MiniIOError):
    """Byte-shuffle input length not divisible by the element size."""


class CodecError(MiniIOError):
    """Compressed body could not be decoded."""


class FormatError(MiniIOError):
    """Stored payload header inconsistent with its body."""


class CorruptBlock(MiniIOError):
    """Checksum mismatch on a stored block."""

    def __init__(self, msg, subfile=None, offset=None):
        super().__init__(msg)
        self.subfile = subfile
        self.offset = offset


class CoverageError(MiniIOError):
    """Requested region has gaps not covered by any written block."""


class StallError(MiniIOError):
    """Staging writer stalled at the queue limit with no readers left."""


class StageTimeout(MiniIOError):
    """Staging reader timed out waiting for a step announcement."""


class ProtocolError(MiniIOError):
    """Staging peer violated the wire protocol."""


class VerifyMismatch(MiniIOError):
    """Artifact contents differ from the oracle recomputation."""
