from .losses import LossBreakdown, TruthTensors, compute_losses, loss_terms, truth_tensors
from .models import ATTN, CONV, AttentionSamplingState, DetectorOutput, MultiviewDetector
from .training import (
    DetectorConfig,
    DetectorWeights,
    evaluate_loss,
    forward,
    images_tensor,
    input_gradients,
    load_weights,
    save_weights,
    train,
    write_loss_csv,
)

__all__ = [
    "ATTN", "CONV", "AttentionSamplingState", "DetectorConfig", "DetectorOutput", "DetectorWeights",
    "LossBreakdown", "MultiviewDetector", "TruthTensors", "compute_losses", "evaluate_loss", "forward",
    "images_tensor", "input_gradients", "load_weights", "loss_terms", "save_weights", "train",
    "truth_tensors", "write_loss_csv",
]
