"""Synthesis, execution and evaluation of multi-service tool-use environments."""

from .config import PipelineConfig, load_config
from .errors import EnvSynthError
from .pipeline import repair_loop, resume_pipeline, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "EnvSynthError",
    "PipelineConfig",
    "__version__",
    "load_config",
    "repair_loop",
    "resume_pipeline",
    "run_pipeline",
]
