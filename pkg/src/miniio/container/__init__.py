"""Aggregated sub-file container engine: fan-in writing, burst-buffer drain,
step-indexed reading, consolidation to the canonical flat format."""

from .layout import AggregatorMap, ContainerLayout, aggregator_map
from .reader import ReaderSession, reader_open
from .writer import WriterSession, writer_open
from .consolidate import consolidate

__all__ = [
    "AggregatorMap", "ContainerLayout", "aggregator_map",
    "ReaderSession", "reader_open", "WriterSession", "writer_open",
    "consolidate",
]
