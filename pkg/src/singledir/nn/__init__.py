from .intervention import ClampMode, InterventionPlan, LayerStats, NoiseSpec, UnitRef, UnitStats
from .layers import LayerSpec
from .model import (Evaluation, ForwardTrace, Model, backward, convnet, evaluate, forward, mlp,
                    predict_logits, sgd_step, softmax_xent)
from .train import EpochRecord, TrainConfig, TrainResult, train

__all__ = [
    "ClampMode", "InterventionPlan", "LayerStats", "NoiseSpec", "UnitRef", "UnitStats", "LayerSpec",
    "Evaluation", "ForwardTrace", "Model", "backward", "convnet", "evaluate", "forward", "mlp",
    "predict_logits", "sgd_step", "softmax_xent", "EpochRecord", "TrainConfig", "TrainResult", "train",
]
