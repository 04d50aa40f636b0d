"""Synthetic domain-decomposed workload harness and comparator experiments."""

from .workload import WorkloadSpec, field_value, generate_patch, patch_selection

__all__ = ["WorkloadSpec", "field_value", "generate_patch", "patch_selection"]
