"""Masked space-time hash fields for dynamic scene reconstruction.

A 3D and a 4D multi-resolution hash encoder are blended per point by a
learned mask, decoded by small MLPs, trained by volume-rendering losses with
uncertainty and mutual-information guidance, and rendered incrementally by
reusing static pixels across frames.
"""

from .config import TrainConfig, load_config
from .field import FieldConfig, SpaceTimeField
from .hashgrid import HashGridConfig, HashTable, collision_stats, encode
from .losses import LossWeights, MineEstimator
from .render import PinholeCamera, composite, render_frame, render_video_incremental
from .sampler import RayImportanceTable, build_importance
from .scene import SceneDataset, generate_synthetic, load_dataset, psnr, ssim
from .trainer import Trainer, ablate, evaluate, load_checkpoint, pipeline_gradcheck, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "load_config",
    "FieldConfig",
    "SpaceTimeField",
    "HashGridConfig",
    "HashTable",
    "collision_stats",
    "encode",
    "LossWeights",
    "MineEstimator",
    "PinholeCamera",
    "composite",
    "render_frame",
    "render_video_incremental",
    "RayImportanceTable",
    "build_importance",
    "SceneDataset",
    "generate_synthetic",
    "load_dataset",
    "psnr",
    "ssim",
    "Trainer",
    "ablate",
    "evaluate",
    "load_checkpoint",
    "pipeline_gradcheck",
    "save_checkpoint",
    "__version__",
]
