"""Tool dependency graphs and trajectory enumeration."""

from .graph import (
    EDGE_TYPES,
    Edge,
    ToolGraph,
    Trajectory,
    enumerate_trajectories,
    infer_dependencies,
    output_fields,
    trajectory_hash,
    validate_tool_graph,
)
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "EDGE_TYPES",
    "Edge",
    "ToolGraph",
    "Trajectory",
    "enumerate_trajectories",
    "infer_dependencies",
    "output_fields",
    "trajectory_hash",
    "validate_tool_graph",
]
