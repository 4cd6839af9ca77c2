"""Fault models and mitigations for NPU inference."""

from .faults import (
    FaultMap,
    apply_fap,
    apply_memory_faults,
    fault_aware_map,
    generate_fault_map,
    inject_bit_flips,
    magnitude_saliency,
)
from .mitigations import (
    RangeBounds,
    fault_aware_retrain,
    find_vulnerable_bits,
    profile_ranges,
    range_restrict,
    te_drop_sim,
)
from .tinynet import QuantNet, TinyNet, make_task

__all__ = [
    "FaultMap",
    "QuantNet",
    "RangeBounds",
    "TinyNet",
    "apply_fap",
    "apply_memory_faults",
    "fault_aware_map",
    "fault_aware_retrain",
    "find_vulnerable_bits",
    "generate_fault_map",
    "inject_bit_flips",
    "magnitude_saliency",
    "make_task",
    "profile_ranges",
    "range_restrict",
    "te_drop_sim",
]
