"""Minimal numeric kernel: strided 2D convolution, channel reductions, resizing.

Images are plain numpy arrays of shape (H, W, C), row-major, with intensities
in [0, 1] when sourced from 8-bit data (value = byte / 255). Convolution
response grids are arrays of shape (rows, cols, N) with one plane per kernel.

All functions are pure and run in the dtype promoted from their inputs:
float32 in, float32 out (the inference path), float64 in, float64 out
(reference/testing paths). Reductions may accumulate at higher precision.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GRAY_COEFFS = (0.299, 0.587, 0.114)


class ChannelExtrema(NamedTuple):
    """Per-kernel min/max over a response grid plus flat row-major arg indices."""

    mins: np.ndarray
    maxs: np.ndarray
    argmins: np.ndarray
    argmaxs: np.ndarray


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of a strided convolution along one axis.

    Raises ValueError when the padded input is smaller than the kernel.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    padded = size + 2 * padding
    if kernel > padded:
        raise ValueError(
            f"kernel size {kernel} exceeds padded input size {padded}"
        )
    return (padded - kernel) // stride + 1


def conv2d_strided(
    image: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Strided cross-correlation of an (H, W, C) image with an (N, C, h, w) bank.

    The image is zero-padded by `padding` pixels on each side; kernels are not
    flipped (CNN convention). Returns a (rows, cols, N) response grid where
    rows = (H + 2*padding - h) // stride + 1 and likewise for cols, and

        out[r, c, n] = sum_k sum_ij kernels[n, k, i, j]
                       * padded[r*stride + i, c*stride + j, k] + bias[n]
    """
    image = np.asarray(image)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {image.shape}")
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be (N, C, h, w), got shape {kernels.shape}")
    n, kc, kh, kw = kernels.shape
    h, w, c = image.shape
    if kc != c:
        raise ValueError(f"channel mismatch: image has {c}, kernels expect {kc}")
    if bias.shape != (n,):
        raise ValueError(f"bias must have shape ({n},), got {bias.shape}")

    rows = conv_output_size(h, kh, stride, padding)
    cols = conv_output_size(w, kw, stride, padding)

    dt = np.result_type(image.dtype, kernels.dtype, bias.dtype)
    image = image.astype(dt, copy=False)
    kernels = kernels.astype(dt, copy=False)

    if padding:
        image = np.pad(image, ((padding, padding), (padding, padding), (0, 0)))
    windows = sliding_window_view(image, (kh, kw), axis=(0, 1))[::stride, ::stride]
    out = np.tensordot(windows, kernels, axes=([2, 3, 4], [1, 2, 3]))
    out += bias.astype(dt, copy=False)
    assert out.shape == (rows, cols, n)
    return out


def channel_min_max(grid: np.ndarray) -> ChannelExtrema:
    """Per-kernel min and max over the rows*cols plane of a (rows, cols, N) grid.

    Arg indices are flat row-major positions of the FIRST occurrence, which is
    what subgradient routing through min/max relies on.
    """
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"grid must be (rows, cols, N), got shape {grid.shape}")
    if grid.size == 0:
        raise ValueError("empty response grid")
    flat = grid.reshape(-1, grid.shape[2])
    argmins = flat.argmin(axis=0)
    argmaxs = flat.argmax(axis=0)
    lanes = np.arange(grid.shape[2])
    return ChannelExtrema(flat[argmins, lanes], flat[argmaxs, lanes], argmins, argmaxs)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luma conversion of an (H, W, 3) image: 0.299 R + 0.587 G + 0.114 B."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    coeffs = np.asarray(GRAY_COEFFS, dtype=image.dtype)
    return (image @ coeffs)[..., None]


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of an (H, W, C) image.

    Sample points span the exact corner pixels of the source; a target axis of
    length 1 samples the first corner. Resizing to the input dims returns a
    bit-identical copy.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be positive, got {out_h}x{out_w}")
    h, w, _ = image.shape
    if (out_h, out_w) == (h, w):
        return image.copy()

    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(image.dtype)[:, None, None]
    fx = (xs - x0).astype(image.dtype)[None, :, None]

    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy
