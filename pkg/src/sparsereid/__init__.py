"""Occlusion-robust person re-identification with token-sparsified vision transformers."""
from .bench import BenchResult, measure_throughput
from .checkpoint import load_model, save_model
from .data import SynthSpec, make_synthetic
from .estimator import SparseReID
from .evaluation import EvalReport, cmc_map, evaluate
from .train import RunConfig, fit_student, fit_teacher
from .vit import ModelConfig, PatchConfig, VisionTransformer

__version__ = "0.1.0"

__all__ = [
    "BenchResult", "EvalReport", "ModelConfig", "PatchConfig", "RunConfig", "SparseReID",
    "SynthSpec", "VisionTransformer", "cmc_map", "evaluate", "fit_student", "fit_teacher",
    "load_model", "make_synthetic", "measure_throughput", "save_model",
]
