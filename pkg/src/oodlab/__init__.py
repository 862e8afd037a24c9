"""Synthetic out-of-distribution detection lab: tape autodiff, MLP heads,
OOD training objectives, scoring, metrics, and an experiment runner."""
from .config import ExperimentConfig, load_config
from .data import GenConfig, generate
from .runner import embedding_analysis, execute

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "GenConfig", "embedding_analysis", "execute", "generate", "load_config"]
