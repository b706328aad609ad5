"""Manual backpropagation, correlation/MSE losses, Adam, and the training loop.

Gradients are computed analytically, in float64, by routing the incoming
gradient through the min/max pooling stage to the first-occurrence
argmin/argmax response positions and accumulating the corresponding input
windows into the kernel gradients. Parameters themselves stay float32 (the
storage and serialization dtype); the optimizer state is float64.

The correlation loss is the negated stabilized Pearson coefficient, so loss
values stay inside [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import metrics
from .data import (
    DatasetManifest,
    TileStore,
    score_manifest,
    split_dataset,
    store_for,
)
from .model import (
    CONV_PADDING,
    CONV_STRIDE,
    IN_CHANNELS,
    INPUT_SIZE,
    KERNEL_SIZE,
    ModelParams,
)

DEFAULT_SEED = 1729
PLCC_EPS = 1e-8

_PARAM_FIELDS = ("kernels", "conv_bias", "pool_min_w", "pool_max_w", "pool_bias")


class NumericError(ArithmeticError):
    """Non-finite value produced during a forward/backward pass."""


@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults follow the reference protocol where
    stated (lr 0.01, decay every 60 epochs, 120 epochs, Adam); batch size,
    decay factor, and initialization are this artifact's documented choices.
    """

    loss: str = "plcc"
    learning_rate: float = 0.01
    decay_interval: int = 60
    decay_factor: float = 0.1
    epochs: int = 120
    batch_size: int = 64
    seed: int = DEFAULT_SEED
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.loss not in ("plcc", "mse"):
            raise ValueError(f"loss must be 'plcc' or 'mse', got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_interval < 1 or self.epochs < 1:
            raise ValueError("decay_interval and epochs must be >= 1")
        if self.loss == "plcc" and self.batch_size < 2:
            raise ValueError("plcc loss needs batch_size >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 1-based epoch index."""
        return self.learning_rate * self.decay_factor ** ((epoch - 1) // self.decay_interval)


@dataclass
class GradientSet:
    """Gradients mirroring ModelParams field-for-field (float64)."""

    kernels: np.ndarray
    conv_bias: np.ndarray
    pool_min_w: np.ndarray
    pool_max_w: np.ndarray
    pool_bias: float


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter field name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_srcc: float
    skipped_batches: int


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog] = field(default_factory=list)


def init_params(
    n_kernels: int,
    seed: int = DEFAULT_SEED,
    loss: str = "plcc",
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Fresh parameters: fan-in uniform kernels, zero conv bias, unit pooling
    weights (so both min and max paths carry gradient from step 0)."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    fan_in = IN_CHANNELS * KERNEL_SIZE * KERNEL_SIZE
    bound = 1.0 / math.sqrt(fan_in)
    kernels = rng.uniform(
        -bound, bound, size=(n_kernels, IN_CHANNELS, KERNEL_SIZE, KERNEL_SIZE)
    )
    return ModelParams(
        kernels=kernels.astype(np.float32),
        conv_bias=np.zeros(n_kernels, dtype=np.float32),
        pool_min_w=np.ones(n_kernels, dtype=np.float32),
        pool_max_w=np.ones(n_kernels, dtype=np.float32),
        pool_bias=0.0,
        loss_kind=loss,
    )


def plcc(predictions: Sequence[float], labels: Sequence[float]) -> float:
    """Stabilized Pearson correlation used as the training objective.

    The denominator gains +1e-8 so constant batches stay finite; the trainer
    minimizes the negation, keeping loss values within [-1, 1].
    """
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("predictions and labels must be equal-length vectors")
    if len(x) < 2:
        raise ValueError("plcc needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(xc @ xc) * math.sqrt(yc @ yc) + PLCC_EPS
    return float((xc @ yc) / denom)


def _params_to_arrays(params: ModelParams | Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    if isinstance(params, ModelParams):
        return {
            name: np.asarray(getattr(params, name), dtype=np.float64)
            for name in _PARAM_FIELDS
        }
    return {name: np.asarray(params[name], dtype=np.float64) for name in _PARAM_FIELDS}


def _forward_sample(arrs: Mapping[str, np.ndarray], patch: np.ndarray):
    """Float64 forward pass keeping what the backward pass needs."""
    kernels = arrs["kernels"]
    n, _, kh, kw = kernels.shape
    padded = np.pad(
        patch.astype(np.float64),
        ((CONV_PADDING, CONV_PADDING), (CONV_PADDING, CONV_PADDING), (0, 0)),
    )
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))[::CONV_STRIDE, ::CONV_STRIDE]
    grid = np.tensordot(windows, kernels, axes=([2, 3, 4], [1, 2, 3])) + arrs["conv_bias"]
    flat = grid.reshape(-1, n)
    argmins = flat.argmin(axis=0)
    argmaxs = flat.argmax(axis=0)
    lanes = np.arange(n)
    mins = flat[argmins, lanes]
    maxs = flat[argmaxs, lanes]
    y = float(arrs["pool_min_w"] @ mins + arrs["pool_max_w"] @ maxs + arrs["pool_bias"])
    cols = grid.shape[1]
    return y, mins, maxs, argmins, argmaxs, cols


def batch_outputs(
    params: ModelParams | Mapping[str, np.ndarray], patches: Sequence[np.ndarray]
) -> np.ndarray:
    """Float64 scores for a batch of patches of any convolution-valid size."""
    arrs = _params_to_arrays(params)
    out = np.empty(len(patches))
    for i, patch in enumerate(patches):
        out[i] = _forward_sample(arrs, np.asarray(patch))[0]
    return out


def batch_loss(
    params: ModelParams | Mapping[str, np.ndarray],
    patches: Sequence[np.ndarray],
    labels: Sequence[float],
    loss: str = "plcc",
) -> float:
    """Loss of a batch under exact float64 evaluation (no gradients).

    This is the function the finite-difference gradient checks perturb.
    """
    y = batch_outputs(params, patches)
    t = np.asarray(labels, dtype=np.float64)
    if loss == "mse":
        return float(np.mean((y - t) ** 2))
    if loss == "plcc":
        return -plcc(y, t)
    raise ValueError(f"unknown loss {loss!r}")


def _loss_gradient(y: np.ndarray, t: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Loss value and dLoss/dy for a batch of predictions."""
    if loss == "mse":
        diff = y - t
        return float(np.mean(diff**2)), 2.0 * diff / len(y)
    if loss == "plcc":
        yc = y - y.mean()
        tc = t - t.mean()
        sy = math.sqrt(yc @ yc)
        st = math.sqrt(tc @ tc)
        denom = sy * st + PLCC_EPS
        num = float(yc @ tc)
        rho = num / denom
        # d rho / dy_i = [tc_i * denom - num * st * yc_i / sy] / denom^2
        if sy > 0:
            grad = (tc * denom - (num * st / sy) * yc) / (denom * denom)
        else:
            grad = tc / denom
        return -rho, -grad
    raise ValueError(f"unknown loss {loss!r}")


def loss_and_gradients(
    params: ModelParams | Mapping[str, np.ndarray],
    patches: Sequence[np.ndarray],
    labels: Sequence[float],
    loss: str = "plcc",
) -> tuple[float, GradientSet]:
    """Batch loss plus analytic gradients for every parameter field.

    The min/max pooling stage routes each sample's upstream gradient entirely
    to the first-occurrence argmin/argmax positions of its response grid; the
    convolution backward then reduces to accumulating the padded input window
    at those positions.
    """
    arrs = _params_to_arrays(params)
    kernels = arrs["kernels"]
    n, _, kh, kw = kernels.shape
    if loss == "plcc" and len(patches) < 2:
        raise ValueError("plcc loss needs at least 2 samples per batch")
    if len(patches) != len(labels):
        raise ValueError("patches and labels must have equal lengths")

    details = []
    y = np.empty(len(patches))
    for i, patch in enumerate(patches):
        out = _forward_sample(arrs, np.asarray(patch))
        if not math.isfinite(out[0]):
            raise NumericError(f"non-finite score for sample {i}")
        y[i] = out[0]
        details.append(out)

    t = np.asarray(labels, dtype=np.float64)
    loss_value, dy = _loss_gradient(y, t, loss)
    if not math.isfinite(loss_value):
        raise NumericError("non-finite loss value")

    g_kernels = np.zeros_like(kernels)
    g_conv_bias = np.zeros(n)
    g_min_w = np.zeros(n)
    g_max_w = np.zeros(n)
    g_pool_bias = 0.0
    w1 = arrs["pool_min_w"]
    w2 = arrs["pool_max_w"]
    lanes = np.arange(n)

    for i, patch in enumerate(patches):
        _, mins, maxs, argmins, argmaxs, cols = details[i]
        dl = dy[i]
        g_min_w += dl * mins
        g_max_w += dl * maxs
        g_pool_bias += dl
        coef_min = dl * w1
        coef_max = dl * w2
        g_conv_bias += coef_min + coef_max

        padded = np.pad(
            np.asarray(patch, dtype=np.float64),
            ((CONV_PADDING, CONV_PADDING), (CONV_PADDING, CONV_PADDING), (0, 0)),
        )
        windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))[
            ::CONV_STRIDE, ::CONV_STRIDE
        ]
        rmin, cmin = np.divmod(argmins, cols)
        rmax, cmax = np.divmod(argmaxs, cols)
        for k in range(n):
            g_kernels[k] += coef_min[k] * windows[rmin[k], cmin[k]]
            g_kernels[k] += coef_max[k] * windows[rmax[k], cmax[k]]

    return loss_value, GradientSet(
        kernels=g_kernels,
        conv_bias=g_conv_bias,
        pool_min_w=g_min_w,
        pool_max_w=g_max_w,
        pool_bias=g_pool_bias,
    )


def init_adam_state(params: ModelParams) -> AdamState:
    zeros = {
        name: np.zeros_like(np.asarray(getattr(params, name), dtype=np.float64))
        for name in _PARAM_FIELDS
    }
    return AdamState(m=zeros, v={k: v.copy() for k, v in zeros.items()})


def adam_step(
    params: ModelParams,
    grads: GradientSet,
    state: AdamState,
    step_index: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state.

    Update math runs in float64; the returned parameters are rounded back to
    the float32 storage dtype.
    """
    if step_index < 1:
        raise ValueError("step_index is 1-based")
    new_values: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name in _PARAM_FIELDS:
        g = np.asarray(getattr(grads, name), dtype=np.float64)
        p = np.asarray(getattr(params, name), dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = state.m[name] * beta1 + (1 - beta1) * g
        v = state.v[name] * beta2 + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1**step_index)
        v_hat = v / (1 - beta2**step_index)
        new_values[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    updated = ModelParams(
        kernels=new_values["kernels"].astype(np.float32),
        conv_bias=new_values["conv_bias"].astype(np.float32),
        pool_min_w=new_values["pool_min_w"].astype(np.float32),
        pool_max_w=new_values["pool_max_w"].astype(np.float32),
        pool_bias=float(new_values["pool_bias"]),
        loss_kind=params.loss_kind,
    )
    return updated, AdamState(m=new_m, v=new_v)


def random_crop(tile: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = tile.shape[:2]
    if h < size or w < size:
        raise ValueError(f"tile {h}x{w} smaller than crop size {size}")
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    return tile[r : r + size, c : c + size]


def train(
    config: TrainConfig,
    train_set: DatasetManifest,
    n_kernels: int = 1,
    val_set: DatasetManifest | None = None,
    store: TileStore | None = None,
    initial: ModelParams | None = None,
    checkpoint_hook: Callable[[int, ModelParams], None] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Run the full training protocol on a Z_LEVEL-style split.

    Each epoch reshuffles the records and takes one fresh random 235x235 crop
    per source tile (evaluation, by contrast, always dense-samples). Batches
    whose labels are constant are skipped under the correlation loss and
    counted in the log. `checkpoint_hook(epoch, params)` fires at each decay
    boundary. Bit-reproducible for a fixed (seed, config, dataset order).
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    store = store if store is not None else store_for(train_set)
    rng = np.random.default_rng(config.seed)
    params = initial if initial is not None else init_params(n_kernels, loss=config.loss, rng=rng)
    state = init_adam_state(params)
    records = train_set.records
    log: list[EpochLog] = []
    step = 0

    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(records))
        batch_losses = []
        skipped = 0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batch_records = [records[i] for i in chunk]
            patches = [
                random_crop(store.get(r), INPUT_SIZE, rng) for r in batch_records
            ]
            labels = [r.label for r in batch_records]
            if config.loss == "plcc" and (
                len(labels) < 2 or len(set(labels)) == 1
            ):
                skipped += 1
                continue
            loss_value, grads = loss_and_gradients(params, patches, labels, config.loss)
            step += 1
            params, state = adam_step(
                params, grads, state, step, lr,
                config.adam_beta1, config.adam_beta2, config.adam_epsilon,
            )
            batch_losses.append(loss_value)

        val_srcc = math.nan
        if val_set is not None and len(val_set) >= 2:
            _, scores, labels = score_manifest(params, val_set)
            val_srcc = metrics.srcc(scores, labels)
        entry = EpochLog(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(batch_losses)) if batch_losses else math.nan,
            val_srcc=val_srcc,
            skipped_batches=skipped,
        )
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if checkpoint_hook is not None and epoch % config.decay_interval == 0:
            checkpoint_hook(epoch, params)

    return TrainResult(params=params, log=log)


def write_training_log(log: Sequence[EpochLog], path, comment: str = "") -> None:
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("epoch,lr,loss,val_srcc,skipped_batches")
    for e in log:
        lines.append(f"{e.epoch},{e.lr!r},{e.train_loss!r},{e.val_srcc!r},{e.skipped_batches}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class FoldsResult:
    reports: list[metrics.EvalReport]
    mean: dict[str, float]


def run_folds(
    config: TrainConfig,
    manifest: DatasetManifest,
    n_folds: int = 10,
    n_kernels: int = 1,
    store: TileStore | None = None,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    on_fold: Callable[[int, metrics.EvalReport], None] | None = None,
) -> FoldsResult:
    """Repeat split/train/test over independently seeded folds.

    Each fold draws its split seed and training seed from a spawned child of
    the base seed, trains from scratch, and evaluates on its own test split
    (never used for selection). The mean ignores NaN metrics.
    """
    if len(manifest) < len(fractions):
        raise ValueError("dataset too small to split")
    children = np.random.SeedSequence(config.seed).spawn(n_folds)
    store = store if store is not None else store_for(manifest)
    reports = []
    for fold, child in enumerate(children):
        fold_rng = np.random.default_rng(child)
        split_seed = int(fold_rng.integers(2**63))
        train_seed = int(fold_rng.integers(2**63))
        train_m, val_m, test_m = split_dataset(manifest, fractions, split_seed)
        fold_config = TrainConfig(**{**config.__dict__, "seed": train_seed})
        result = train(fold_config, train_m, n_kernels, val_set=val_m, store=store)
        ids, scores, labels = score_manifest(result.params, test_m, store=store)
        report = metrics.evaluate(ids, scores, labels, manifest.kind)
        reports.append(report)
        if on_fold is not None:
            on_fold(fold, report)

    mean = {}
    for key in ("srcc", "plcc", "roc_auc", "pr_auc"):
        values = [getattr(r, key) for r in reports if not math.isnan(getattr(r, key))]
        mean[key] = float(np.mean(values)) if values else math.nan
    return FoldsResult(reports=reports, mean=mean)
