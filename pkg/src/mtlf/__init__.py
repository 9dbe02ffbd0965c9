"""Desk-scale multitask learning for sentence-level text tasks.

A shared transformer encoder with per-task heads (hard parameter
sharing), CE/MSE loss dispatch, a per-epoch merge-and-shuffle batch
scheduler, early stopping on validation CE loss, and a 5-fold
cross-validated experiment grid, all on a from-scratch reverse-mode
autodiff tensor core.
"""

from .autograd import Tensor, no_grad
from .encoder import EncoderConfig, EncoderParams, profile_config
from .engine import Batch, EarlyStopState, MtlEngine, TrainConfig, early_stop_check, run_target_finetune, train_step
from .harness import (
    ConfusionCounts,
    FoldSplit,
    GridDatasets,
    GridEntry,
    MetricsReport,
    build_experiment_grid,
    evaluate_model,
    kfold_split,
    run_cross_validation,
    run_grid,
)
from .heads import SharedModel, TaskSpec, attach_head, forward_task, load_checkpoint, new_model, save_checkpoint, task_loss
from .optim import AdamW, AdamWState, adamw_step
from .text_pipeline import (
    DatasetManifest,
    EncodedExample,
    RawExample,
    Vocab,
    build_vocab,
    cap_dataset,
    encode_pair,
    encode_single,
    load_dataset,
    make_synthetic_corpus,
)

__version__ = "0.1.0"
