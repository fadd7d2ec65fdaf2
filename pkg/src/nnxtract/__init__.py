"""nnxtract: query-only parameter extraction for fully connected ReLU nets."""

from .extracted import ExtractedLayer, ExtractedModel, ExtractedPrefix
from .model import VictimModel, forward, forward_batch, forward_prefix, \
    local_linear_map, verify_extraction
from .nnxio import load_model, save_extracted, save_model
from .oracle import Oracle
from .pipeline import ExtractionConfig, extract_model, run_benchmark
from .victimgen import GenSpec, generate, generate_suite

__version__ = "0.1.0"

__all__ = [
    "ExtractedLayer", "ExtractedModel", "ExtractedPrefix", "ExtractionConfig",
    "GenSpec", "Oracle", "VictimModel", "extract_model", "forward",
    "forward_batch", "forward_prefix", "generate", "generate_suite",
    "load_model", "local_linear_map", "run_benchmark", "save_extracted",
    "save_model", "verify_extraction",
]
