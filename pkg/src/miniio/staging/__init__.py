"""Network staging engine: writer-side step buffering with queue-limit
semantics, a framed control protocol, and pluggable dataplanes."""

from .params import StagingParams
from .reader import StageReader
from .writer import StageWriter, stage_writer_open

__all__ = ["StagingParams", "StageReader", "StageWriter", "stage_writer_open"]
