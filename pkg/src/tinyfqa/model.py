"""The N-kernel sharpness model: one strided convolution plus min/max pooling.

A patch is scored as

    y = sum_n [ w1[n] * min_n + w2[n] * max_n ] + w3

where (min_n, max_n) are the channel-wise extrema of the response grid
produced by convolving the patch with an (N, 3, 7, 7) kernel bank at stride 5
with one pixel of zero padding. Higher scores mean more blur.

Parameters live in float32; scoring runs in the dtype of the patch.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorops import channel_min_max, conv2d_strided

INPUT_SIZE = 235          # trained patch side length expected by forward()
CONV_STRIDE = 5
CONV_PADDING = 1
KERNEL_SIZE = 7
IN_CHANNELS = 3

WEIGHT_MAGIC = b"FLNN"
WEIGHT_VERSION = 1
_HEADER = struct.Struct("<4sHHBBBB")  # magic, version, N, h, w, channels, loss tag

LOSS_KINDS = ("plcc", "mse")
_LOSS_TAGS = {"plcc": 0, "mse": 1}
_TAG_LOSSES = {v: k for k, v in _LOSS_TAGS.items()}

# Published reference parameter counts for the 1/2/10-kernel presets. These do
# not match the count implied by the parameter inventory (150N + 1); the
# engine reports both. See README "Parameter counts".
PUBLISHED_PARAM_COUNTS = {1: "148", 2: "299", 10: "1.5K"}


class WeightFormatError(ValueError):
    """Raised for malformed weight files or streams."""


@dataclass(frozen=True)
class ModelParams:
    """All trainable state of an N-kernel model, stored as float32.

    kernels      (N, C, h, w) convolution bank
    conv_bias    (N,) per-kernel bias added to the response grid
    pool_min_w   (N,) weights on the per-kernel response minima
    pool_max_w   (N,) weights on the per-kernel response maxima
    pool_bias    scalar offset of the pooled score
    loss_kind    'plcc' or 'mse'; records the training objective so renderers
                 can pick an absolute score scale for MSE-trained models
    """

    kernels: np.ndarray
    conv_bias: np.ndarray
    pool_min_w: np.ndarray
    pool_max_w: np.ndarray
    pool_bias: float
    loss_kind: str = "plcc"

    def __post_init__(self):
        kernels = np.ascontiguousarray(self.kernels, dtype=np.float32)
        if kernels.ndim != 4:
            raise ValueError(f"kernels must be (N, C, h, w), got {kernels.shape}")
        n = kernels.shape[0]
        vectors = {}
        for name in ("conv_bias", "pool_min_w", "pool_max_w"):
            v = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if v.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {v.shape}")
            vectors[name] = v
        pool_bias = float(self.pool_bias)
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        for name, arr in [("kernels", kernels), *vectors.items()]:
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if not np.isfinite(pool_bias):
            raise ValueError("non-finite pool_bias")
        for name, arr in [("kernels", kernels), *vectors.items()]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "pool_bias", pool_bias)

    @property
    def n_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_shape(self) -> tuple[int, int]:
        return self.kernels.shape[2], self.kernels.shape[3]


def param_count(params: ModelParams) -> int:
    """Number of trainable scalars: N*C*h*w kernels + 3N pooling/bias + 1."""
    return (
        params.kernels.size
        + params.conv_bias.size
        + params.pool_min_w.size
        + params.pool_max_w.size
        + 1
    )


def response_grid(params: ModelParams, patch: np.ndarray) -> np.ndarray:
    """Convolution responses of a patch: (rows, cols, N), stride 5, padding 1."""
    return conv2d_strided(
        patch, params.kernels, params.conv_bias, CONV_STRIDE, CONV_PADDING
    )


def pool_response(params: ModelParams, grid: np.ndarray) -> float:
    """Map a response grid to a scalar via weighted channel-wise min and max."""
    ext = channel_min_max(grid)
    w1 = params.pool_min_w.astype(grid.dtype, copy=False)
    w2 = params.pool_max_w.astype(grid.dtype, copy=False)
    return float(w1 @ ext.mins + w2 @ ext.maxs + params.pool_bias)


def score_patch(params: ModelParams, patch: np.ndarray) -> float:
    """Sharpness score of a patch of any size the convolution admits."""
    return pool_response(params, response_grid(params, patch))


def forward(params: ModelParams, patch: np.ndarray) -> float:
    """Score a 235x235x3 patch. Higher values mean more blur.

    The input size is fixed to the trained geometry; use dense sampling
    (tinyfqa.data.dense_score) for larger tiles.
    """
    patch = np.asarray(patch)
    expected = (INPUT_SIZE, INPUT_SIZE, params.in_channels)
    if patch.shape != expected:
        raise ValueError(f"patch must be {expected}, got {patch.shape}")
    return score_patch(params, patch)


def serialize(params: ModelParams) -> bytes:
    """Pack params into the little-endian weight stream (see load/save)."""
    n = params.n_kernels
    h, w = params.kernel_shape
    header = _HEADER.pack(
        WEIGHT_MAGIC, WEIGHT_VERSION, n, h, w,
        params.in_channels, _LOSS_TAGS[params.loss_kind],
    )
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (
            params.kernels,
            params.conv_bias,
            params.pool_min_w,
            params.pool_max_w,
            np.float32(params.pool_bias),
        )
    )
    return header + body


def deserialize(blob: bytes) -> ModelParams:
    """Rebuild ModelParams from a weight stream; round-trips bit-exactly."""
    if len(blob) < _HEADER.size:
        raise WeightFormatError("truncated stream: header incomplete")
    magic, version, n, h, w, channels, tag = _HEADER.unpack_from(blob)
    if magic != WEIGHT_MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}")
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    if n < 1 or h < 1 or w < 1 or channels < 1:
        raise WeightFormatError("degenerate geometry in header")
    if tag not in _TAG_LOSSES:
        raise WeightFormatError(f"unknown loss tag {tag}")
    count = n * channels * h * w + 3 * n + 1
    expected = _HEADER.size + 4 * count
    if len(blob) != expected:
        raise WeightFormatError(
            f"stream length {len(blob)} != expected {expected} bytes"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if not np.all(np.isfinite(flat)):
        raise WeightFormatError("non-finite parameter values")
    sizes = [n * channels * h * w, n, n, n, 1]
    parts = np.split(flat.astype(np.float32), np.cumsum(sizes)[:-1])
    return ModelParams(
        kernels=parts[0].reshape(n, channels, h, w),
        conv_bias=parts[1],
        pool_min_w=parts[2],
        pool_max_w=parts[3],
        pool_bias=float(parts[4][0]),
        loss_kind=_TAG_LOSSES[tag],
    )


def save_weights(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(serialize(params))


def load_weights(path: str | Path) -> ModelParams:
    return deserialize(Path(path).read_bytes())


def kernel_spectrum(
    params: ModelParams, kernel_index: int, fft_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """DC-centered 2D spectrum of one kernel, per channel.

    The kernel is zero-padded to fft_size x fft_size before the transform so
    the frequency response is smoothly sampled. Returns (magnitude, phase),
    each of shape (C, fft_size, fft_size); phase is unwrapped 1D along each
    axis outward from the DC bin.
    """
    if not 0 <= kernel_index < params.n_kernels:
        raise IndexError(f"kernel index {kernel_index} out of range")
    h, w = params.kernel_shape
    if fft_size < max(h, w):
        raise ValueError(f"fft_size {fft_size} smaller than kernel {h}x{w}")
    mags = np.empty((params.in_channels, fft_size, fft_size))
    phases = np.empty_like(mags)
    for ch in range(params.in_channels):
        k = params.kernels[kernel_index, ch].astype(np.float64)
        spectrum = np.fft.fftshift(np.fft.fft2(k, s=(fft_size, fft_size)))
        mags[ch] = np.abs(spectrum)
        phases[ch] = _unwrap_from_center(np.angle(spectrum), fft_size // 2)
    return mags, phases


def _unwrap_from_center(phase: np.ndarray, center: int) -> np.ndarray:
    out = phase.copy()
    # along the DC row, outward from the DC column
    out[center, center:] = np.unwrap(out[center, center:])
    out[center, : center + 1] = np.unwrap(out[center, : center + 1][::-1])[::-1]
    # then along every column, outward from the DC row
    out[center:, :] = np.unwrap(out[center:, :], axis=0)
    out[: center + 1, :] = np.unwrap(out[: center + 1, :][::-1], axis=0)[::-1]
    return out


def export_spectrum_csv(
    params: ModelParams,
    kernel_index: int,
    out_dir: str | Path,
    fft_size: int = 64,
) -> list[Path]:
    """Write magnitude/phase grids as CSV, one file per channel per quantity."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mags, phases = kernel_spectrum(params, kernel_index, fft_size)
    written = []
    for name, grids in (("magnitude", mags), ("phase", phases)):
        for ch in range(params.in_channels):
            path = out_dir / f"kernel{kernel_index}_{name}_ch{ch}.csv"
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerows(grids[ch].tolist())
            written.append(path)
    return written
