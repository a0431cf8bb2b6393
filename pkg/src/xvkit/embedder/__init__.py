"""Network execution and training for the NetSpec architectures."""

from .layers import splice, stats_pool
from .losses import (
    LossConfig,
    a_softmax_loss,
    am_softmax_loss,
    loss_and_grads,
    multitask_loss,
    psi,
    softmax_loss,
)
from .model import EmbedderNet, Embedding, ForwardOutput, extract_embedding
from .train import (
    GradCheckReport,
    TrainConfig,
    TrainResult,
    Utterance,
    build_model,
    grad_check,
    load_model,
    save_model,
    semiorth_deviation,
    semiorth_step,
    semiorth_update,
    train,
)

__all__ = [
    "EmbedderNet", "Embedding", "ForwardOutput", "GradCheckReport", "LossConfig", "TrainConfig",
    "TrainResult", "Utterance", "a_softmax_loss", "am_softmax_loss", "build_model",
    "extract_embedding", "grad_check", "load_model", "loss_and_grads", "multitask_loss", "psi",
    "save_model", "semiorth_deviation", "semiorth_step", "semiorth_update", "softmax_loss",
    "splice", "stats_pool", "train",
]
