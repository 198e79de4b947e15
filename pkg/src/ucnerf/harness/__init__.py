"""Configuration, training, evaluation, ablations and the command-line interface."""

from .config import TrainConfig, load_config
from .data import SceneData, prepare_scene, select_source_views
from .evaluation import ExperimentReport, evaluate, evaluate_model
from .training import train

__all__ = ["TrainConfig", "load_config", "SceneData", "prepare_scene", "select_source_views",
           "ExperimentReport", "evaluate", "evaluate_model", "train"]
