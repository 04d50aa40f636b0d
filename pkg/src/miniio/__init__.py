"""miniio: step-based parallel I/O and data staging toolkit.

Engines write domain-decomposed array data step by step into aggregated
sub-file containers, burst buffers with background drain, canonical flat
files, or a network staging endpoint, with optional in-line lossless
compression.  A workload harness reproduces comparative I/O experiments
as verifiable trends.
"""

from .codecs import CodecSpec, StoredPayload, decode, encode
from .core import (
    DTYPES,
    BlockRecord,
    Dtype,
    EngineParams,
    MODES,
    Selection,
    StepIndex,
    VariableDef,
    canonical_offset,
    crc32c,
    index_merge,
    index_parse,
    index_serialize,
    validate_selection,
)

__version__ = "0.1.0"

__all__ = [
    "BlockRecord", "CodecSpec", "DTYPES", "Dtype", "EngineParams", "MODES",
    "Selection", "StepIndex", "StoredPayload", "VariableDef",
    "canonical_offset", "crc32c", "decode", "encode", "index_merge",
    "index_parse", "index_serialize", "validate_selection", "__version__",
]
