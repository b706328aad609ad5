"""tinyfqa: focus quality assessment with a single-conv-layer CPU model."""

__version__ = "0.1.0"

from .model import (
    INPUT_SIZE,
    ModelParams,
    forward,
    load_weights,
    param_count,
    save_weights,
)
from .training import TrainConfig, train, run_folds
from .data import (
    DatasetManifest,
    SampleRecord,
    dense_score,
    load_manifest,
    split_dataset,
)
from .metrics import EvalReport, evaluate, plcc, pr_auc, roc_auc, srcc
from .heatmap import HeatmapGrid, normalize_grid, render_overlay, score_scan
from .bench import TimingReport, estimate_scanner_throughput, time_patch_scoring

__all__ = [
    "INPUT_SIZE",
    "ModelParams",
    "forward",
    "load_weights",
    "param_count",
    "save_weights",
    "TrainConfig",
    "train",
    "run_folds",
    "DatasetManifest",
    "SampleRecord",
    "dense_score",
    "load_manifest",
    "split_dataset",
    "EvalReport",
    "evaluate",
    "plcc",
    "pr_auc",
    "roc_auc",
    "srcc",
    "HeatmapGrid",
    "normalize_grid",
    "render_overlay",
    "score_scan",
    "TimingReport",
    "estimate_scanner_throughput",
    "time_patch_scoring",
]
