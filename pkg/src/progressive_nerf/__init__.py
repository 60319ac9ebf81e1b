"""Progressive multi-scale radiance fields grown stage by stage."""

from .autodiff import AdamState, ParamVector, Tape, adam_step, grad_check, reset_optimizer
from .curriculum import (
    ABLATIONS,
    StageLog,
    TrainConfig,
    assign_stage,
    expand_training_set,
    run_curriculum,
    stage_loss,
)
from .encoding import EncodingConfig, encode, normalize_position, windowed_encode
from .field import FieldConfig, FieldParams, forward, grow, init_field, load_params, save_params
from .geometry import Camera, Ray, generate_ray, stratified_samples
from .metrics import freq_channel_weights, psnr, ssim
from .render import composite, render_image, render_ray
from .scenegen import (
    StagedDataset,
    build_synthetic_scene,
    generate_orbit_dataset,
    load_dataset,
    oracle_render,
    save_dataset,
)

__all__ = [
    "AdamState",
    "ParamVector",
    "Tape",
    "adam_step",
    "grad_check",
    "reset_optimizer",
    "ABLATIONS",
    "StageLog",
    "TrainConfig",
    "assign_stage",
    "expand_training_set",
    "run_curriculum",
    "stage_loss",
    "EncodingConfig",
    "encode",
    "normalize_position",
    "windowed_encode",
    "FieldConfig",
    "FieldParams",
    "forward",
    "grow",
    "init_field",
    "load_params",
    "save_params",
    "Camera",
    "Ray",
    "generate_ray",
    "stratified_samples",
    "freq_channel_weights",
    "psnr",
    "ssim",
    "composite",
    "render_image",
    "render_ray",
    "StagedDataset",
    "build_synthetic_scene",
    "generate_orbit_dataset",
    "load_dataset",
    "oracle_render",
    "save_dataset",
]

__version__ = "0.1.0"
