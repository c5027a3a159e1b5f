"""GDPnet: speech-driven 3D face animation with geometry-guided latent constraints, in plain numpy."""

from .data import SynthConfig, generate_synthetic_dataset, in_memory_dataset, load_dataset
from .evaluate import evaluate, mse_metric, per_vertex_error
from .geometry import GeoEncoder, fit_geometry_encoder
from .losses import constraint_loss, hsic_empirical, huber_elementwise, total_loss
from .model import VARIANTS, GDPNet, ModelConfig
from .train import TrainConfig, load_model, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "GDPNet", "GeoEncoder", "ModelConfig", "SynthConfig", "TrainConfig", "VARIANTS",
    "constraint_loss", "evaluate", "fit_geometry_encoder", "generate_synthetic_dataset",
    "hsic_empirical", "huber_elementwise", "in_memory_dataset", "load_dataset", "load_model",
    "mse_metric", "per_vertex_error", "run_ablation", "total_loss", "train",
]
