"""sliceview: the consumer side of the pipeline.

A stepping-mode analysis client that reads gridded step data from a sub-file
container, a canonical flat file, or a live staging endpoint, extracts a 2D
level slice, computes statistics, and renders one heatmap image per step.

This package deliberately re-implements the wire protocol and on-disk
formats from their published descriptions instead of importing the producer
package: the format is the contract.
"""

__version__ = "0.1.0"
