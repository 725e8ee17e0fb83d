"""archfuzz: differential fuzzing of generated neural architectures."""

from .detector import DetectorConfig, Finding, chebyshev_distance
from .engine import Backend, StepResult, list_backends, resolve_backend, run_training_step
from .fuzzer import GenerationConfig, generate_models
from .ir import GraphError, ModelGraph, Node, ShapeError, infer_shapes, validate_graph
from .modelspec import ModelSpec, load_spec, save_spec
from .trace import TraceBundle, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "DetectorConfig",
    "Finding",
    "GenerationConfig",
    "GraphError",
    "ModelGraph",
    "ModelSpec",
    "Node",
    "ShapeError",
    "StepResult",
    "TraceBundle",
    "chebyshev_distance",
    "generate_models",
    "infer_shapes",
    "list_backends",
    "load_spec",
    "read_trace",
    "resolve_backend",
    "run_training_step",
    "save_spec",
    "validate_graph",
    "write_trace",
]
