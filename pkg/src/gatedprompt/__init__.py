"""Gated prompt tuning for small vision transformers.

A self-contained float64 stack: an autodiff tensor core with a
finite-difference oracle, a minimal ViT backbone with temperature-shaped
attention, the shallow/deep/gated prompt-tuning variants, gate analysis
tooling, a deterministic SGD trainer, and a CLI tying them together.
"""

__version__ = "0.1.0"

from .analysis import (
    SelectionReport,
    accumulated_weights,
    closed_form_aggregate,
    residual_prompt_weight,
    selection_ratio,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import LabeledDataset, generate_depth_selective, load_dataset, save_dataset, split
from .prompts import (
    GateBank,
    PromptTrace,
    TemperatureBank,
    assert_frozen,
    build_trainable_mask,
    gate_values,
    gated_forward,
    vpt_deep_forward,
    vpt_shallow_forward,
)
from .tensor import Tensor, backward, finite_diff_check
from .training import RunMetrics, TrainConfig, evaluate, run_ablation, sgd_step, train
from .vit import TokenSequence, ViTConfig, init_params, vit_forward

__all__ = [
    "Checkpoint",
    "GateBank",
    "LabeledDataset",
    "PromptTrace",
    "RunMetrics",
    "SelectionReport",
    "TemperatureBank",
    "Tensor",
    "TokenSequence",
    "TrainConfig",
    "ViTConfig",
    "accumulated_weights",
    "assert_frozen",
    "backward",
    "build_trainable_mask",
    "closed_form_aggregate",
    "evaluate",
    "finite_diff_check",
    "gate_values",
    "gated_forward",
    "generate_depth_selective",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "residual_prompt_weight",
    "run_ablation",
    "save_checkpoint",
    "save_dataset",
    "selection_ratio",
    "sgd_step",
    "split",
    "train",
    "vit_forward",
    "vpt_deep_forward",
    "vpt_shallow_forward",
]
