"""RNN-T toy speech recogniser with frozen echo state network layers."""
from .errors import EsnAsrError
from .experiments import ExperimentConfig, evaluate, run_training
from .persistence import load_model, save_model
from .transducer import ModelConfig, build_model, greedy_decode, transducer_loss

__all__ = ["EsnAsrError", "ExperimentConfig", "ModelConfig", "build_model", "evaluate",
           "greedy_decode", "load_model", "run_training", "save_model", "transducer_loss"]
__version__ = "0.1.0"
