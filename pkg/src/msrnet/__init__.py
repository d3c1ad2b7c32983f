"""Multi-scheme regression guidance for cell instance segmentation."""
from .annotations import CellAnnotation
from .config import ConfigError, RunConfig, bundled_config
from .decode import InstancePrediction, decode_instances, decode_unguided
from .estimator import MSRNetSegmenter
from .evaluation import EvalResult, average_precision, evaluate
from .synth import SceneConfig, generate_dataset, generate_scene, load_split

__all__ = [
    "CellAnnotation",
    "ConfigError",
    "EvalResult",
    "InstancePrediction",
    "MSRNetSegmenter",
    "RunConfig",
    "SceneConfig",
    "average_precision",
    "bundled_config",
    "decode_instances",
    "decode_unguided",
    "evaluate",
    "generate_dataset",
    "generate_scene",
    "load_split",
]
