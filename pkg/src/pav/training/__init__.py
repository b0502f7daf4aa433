from .dataset import SceneDataset, TrainingFrame
from .losses import LossWeights, loss_color, loss_depth, total_loss
from .loop import NumericAbort, TrainConfig, build_model, evaluate, frame_set, train
from .metrics import psnr, ssim
from .synthetic import SceneConfig, generate_synthetic_scene

__all__ = [
    "SceneDataset", "TrainingFrame", "LossWeights", "loss_color", "loss_depth", "total_loss",
    "NumericAbort", "TrainConfig", "build_model", "evaluate", "frame_set", "train", "psnr", "ssim",
    "SceneConfig", "generate_synthetic_scene",
]
