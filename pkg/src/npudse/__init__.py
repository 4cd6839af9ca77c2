"""Design-space exploration and reliability analysis for neural processing units."""

from .cost import CostReport, build_cost_graph, evaluate_cost, identify_bottleneck
from .design_space import (
    build_flow_graph,
    check_legality,
    enumerate_designs,
    enumerate_topologies,
    load_component_library,
    load_design,
    load_design_space,
)
from .dse import Objectives, exhaustive, explore, random_search, simulated_annealing
from .funcsim import simulate, simulate_with_faults
from .mapping import Schedule, count_schedules, data_movement_volume, formulate_mapping_space, validate_schedule
from .workload import fuse_operators, lower_graph, lower_to_nest, parse_model

__version__ = "0.1.0"

__all__ = [
    "CostReport",
    "Objectives",
    "Schedule",
    "build_cost_graph",
    "build_flow_graph",
    "check_legality",
    "count_schedules",
    "data_movement_volume",
    "enumerate_designs",
    "enumerate_topologies",
    "evaluate_cost",
    "exhaustive",
    "explore",
    "formulate_mapping_space",
    "fuse_operators",
    "identify_bottleneck",
    "load_component_library",
    "load_design",
    "load_design_space",
    "lower_graph",
    "lower_to_nest",
    "parse_model",
    "random_search",
    "simulate",
    "simulate_with_faults",
    "simulated_annealing",
    "validate_schedule",
]
