from .io import load_model, model_bytes, save_model
from .model import (
    Sttf,
    SttfConfig,
    attention_probabilities,
    build_model,
    cycle_position_features,
    embed_tokens,
    forward,
    masked_mae,
    masked_mse,
    multi_head_attention,
)
from .train import (
    EarlyStopping,
    Forecast,
    OptimConfig,
    TrainedModel,
    evaluate,
    fit,
    predict_trajectory,
    target_schedule,
    train_steps,
)

__all__ = [
    "EarlyStopping", "Forecast", "OptimConfig", "Sttf", "SttfConfig", "TrainedModel",
    "attention_probabilities", "build_model", "cycle_position_features", "embed_tokens", "evaluate", "fit",
    "forward", "load_model", "masked_mae", "masked_mse", "model_bytes", "multi_head_attention",
    "predict_trajectory", "save_model", "target_schedule", "train_steps",
]
