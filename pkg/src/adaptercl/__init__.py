"""Adapter-based continual learning on a small numpy autodiff core."""

from .adapter import Adapter, AdapterSet, adapter_forward
from .backbone import Backbone, BackboneConfig, PretrainingError, pretrain_backbone
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .data import Dataset, DatasetSpec, TaskSplit, generate_synthetic
from .engine import (
    ContinualModel,
    FreezeViolation,
    MemoryBudgetError,
    RehearsalMemory,
    RoundConfig,
    RoundReport,
    Toggles,
    build_finetune_set,
    finetune_heads,
    learn_task,
    multi_head_loss,
    run_round,
)
from .heads import TaskHead, map_labels, select_predictions
from .metrics import EmptyClassError, class_recalls, evaluate_mcr
from .ops import DimensionError
from .optim import Optimizer, OptimizerConfig
from .runner import ConfigError, RunConfig, load_config, run_ablation, run_baseline, run_continual
from .tensor import Parameter, Tensor, no_grad

__version__ = "0.1.0"
