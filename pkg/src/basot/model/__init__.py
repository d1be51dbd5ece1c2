from .config import ModelConfig
from .network import ForwardOutput, Model, build_model
from .training import TrainSample, TrainState, grad_check, prepare_sample, train_step
from .decoding import greedy_decode, reformat_to_sot
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig",
    "ForwardOutput",
    "Model",
    "build_model",
    "TrainSample",
    "TrainState",
    "grad_check",
    "prepare_sample",
    "train_step",
    "greedy_decode",
    "reformat_to_sot",
    "load_checkpoint",
    "save_checkpoint",
]
