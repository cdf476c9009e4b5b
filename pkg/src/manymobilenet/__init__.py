"""Many-MobileNet: an ensemble of small MobileNetV2-SE classifiers for fundus image gradability.

Pure numpy: forward and backward passes, AdamP training, augmentation,
metrics and ensemble fusion.
"""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, DataError, MetricError, NonFiniteError, ShapeError, TapeError
from .tensor_core import Rng
from .model import Model, ModelSpec, build_model, load_checkpoint, param_count, param_stats, save_checkpoint
from .metrics import MetricsReport, auprc, auroc, evaluate
from .augment import Dataset, gen_synthetic, load_dataset
from .train import TrainConfig, fit, predict_proba
from .fusion import Ensemble, EnsembleSpec, fuse

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "MetricError", "NonFiniteError", "ShapeError", "TapeError",
    "Rng", "Model", "ModelSpec", "build_model", "load_checkpoint", "param_count", "param_stats", "save_checkpoint",
    "MetricsReport", "auprc", "auroc", "evaluate", "Dataset", "gen_synthetic", "load_dataset",
    "TrainConfig", "fit", "predict_proba", "Ensemble", "EnsembleSpec", "fuse",
]
