"""Dense scan scoring and blur heatmap rendering.

A scan is covered with 235x235 crops at stride 128 (same position rule as
dense tile scoring, including the clamped border crop), giving a score
lattice. The lattice is normalized either per scan (min-max) or against an
absolute score range, mapped through a fixed blue-to-red colormap, and alpha
blended over the grayscale scan. Each lattice value sits at its crop center
for interpolation; beyond the outermost centers values are edge-extended.

Rendering is pure: identical inputs give bit-identical images.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DENSE_STRIDE, crop_positions, save_image
from .model import INPUT_SIZE, ModelParams, forward
from .tensorops import to_grayscale

MODE_PER_SCAN = "per-scan"
MODE_ABSOLUTE = "absolute"

#: absolute-score range for models trained on raw z-levels (MSE objective)
ABSOLUTE_RANGE = (0.0, 12.0)

#: piecewise-linear colormap control points (value, (r, g, b))
DEFAULT_COLORMAP = (
    (0.00, (0.0, 0.0, 1.0)),
    (0.25, (0.0, 1.0, 1.0)),
    (0.50, (0.0, 1.0, 0.0)),
    (0.75, (1.0, 1.0, 0.0)),
    (1.00, (1.0, 0.0, 0.0)),
)


@dataclass(frozen=True)
class HeatmapGrid:
    """Score lattice over a scan plus the geometry needed to render it."""

    scores: np.ndarray
    row_offsets: tuple[int, ...]
    col_offsets: tuple[int, ...]
    crop_size: int
    stride: int
    scan_dims: tuple[int, int]


def score_scan(
    params: ModelParams,
    scan: np.ndarray,
    stride: int = DENSE_STRIDE,
    threads: int = 1,
) -> HeatmapGrid:
    """One forward score per dense crop position of the scan."""
    scan = np.asarray(scan)
    if scan.ndim != 3:
        raise ValueError(f"scan must be (H, W, C), got shape {scan.shape}")
    rows = crop_positions(scan.shape[0], INPUT_SIZE, stride)
    cols = crop_positions(scan.shape[1], INPUT_SIZE, stride)
    scores = np.empty((len(rows), len(cols)), dtype=np.float64)

    def score_row(i: int) -> None:
        r = rows[i]
        for j, c in enumerate(cols):
            scores[i, j] = forward(params, scan[r : r + INPUT_SIZE, c : c + INPUT_SIZE])

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(score_row, range(len(rows))))
    else:
        for i in range(len(rows)):
            score_row(i)
    return HeatmapGrid(
        scores=scores,
        row_offsets=tuple(rows),
        col_offsets=tuple(cols),
        crop_size=INPUT_SIZE,
        stride=stride,
        scan_dims=(scan.shape[0], scan.shape[1]),
    )


def normalize_scores(
    scores: np.ndarray,
    mode: str = MODE_PER_SCAN,
    lo: float = ABSOLUTE_RANGE[0],
    hi: float = ABSOLUTE_RANGE[1],
) -> np.ndarray:
    """Map raw scores to [0, 1].

    per-scan: (x - min) / (max - min); a constant lattice maps to all 0.5.
    absolute: clamp((x - lo) / (hi - lo), 0, 1) against a fixed score range.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score grid")
    if mode == MODE_PER_SCAN:
        mn, mx = scores.min(), scores.max()
        if mx == mn:
            return np.full_like(scores, 0.5)
        return (scores - mn) / (mx - mn)
    if mode == MODE_ABSOLUTE:
        if hi <= lo:
            raise ValueError(f"absolute range needs hi > lo, got [{lo}, {hi}]")
        return np.clip((scores - lo) / (hi - lo), 0.0, 1.0)
    raise ValueError(f"unknown normalization mode {mode!r}")


def normalize_grid(
    grid: HeatmapGrid,
    mode: str = MODE_PER_SCAN,
    lo: float = ABSOLUTE_RANGE[0],
    hi: float = ABSOLUTE_RANGE[1],
) -> HeatmapGrid:
    return replace(grid, scores=normalize_scores(grid.scores, mode, lo, hi))


def apply_colormap(values: np.ndarray, colormap=DEFAULT_COLORMAP) -> np.ndarray:
    """Map values in [0, 1] to RGB via the piecewise-linear control points."""
    values = np.asarray(values, dtype=np.float64)
    stops = np.array([s for s, _ in colormap])
    channels = np.array([c for _, c in colormap], dtype=np.float64)
    out = np.empty(values.shape + (3,))
    for ch in range(3):
        out[..., ch] = np.interp(values, stops, channels[:, ch])
    return out


def _lattice_to_image(grid: HeatmapGrid) -> np.ndarray:
    """Bilinearly upsample lattice values to scan resolution.

    Values sit at crop centers; the (possibly clamped) final position makes
    center spacing non-uniform, so interpolation runs on the actual center
    coordinates. Pixels outside the outermost centers take the edge value.
    """
    half = (grid.crop_size - 1) / 2.0
    r_centers = np.asarray(grid.row_offsets, dtype=np.float64) + half
    c_centers = np.asarray(grid.col_offsets, dtype=np.float64) + half
    h, w = grid.scan_dims
    fi = np.interp(np.arange(h), r_centers, np.arange(len(r_centers), dtype=np.float64))
    fj = np.interp(np.arange(w), c_centers, np.arange(len(c_centers), dtype=np.float64))
    i0 = np.floor(fi).astype(int)
    j0 = np.floor(fj).astype(int)
    i1 = np.minimum(i0 + 1, len(r_centers) - 1)
    j1 = np.minimum(j0 + 1, len(c_centers) - 1)
    wi = (fi - i0)[:, None]
    wj = (fj - j0)[None, :]
    v = grid.scores
    return (
        v[np.ix_(i0, j0)] * (1 - wi) * (1 - wj)
        + v[np.ix_(i1, j0)] * wi * (1 - wj)
        + v[np.ix_(i0, j1)] * (1 - wi) * wj
        + v[np.ix_(i1, j1)] * wi * wj
    )


def render_overlay(
    grid: HeatmapGrid,
    scan: np.ndarray,
    colormap=DEFAULT_COLORMAP,
    alpha: float = 0.5,
) -> np.ndarray:
    """Blend the colormapped score lattice over the grayscale scan.

    Expects a grid already normalized to [0, 1]. Returns a float (H, W, 3)
    image in [0, 1]: alpha * color + (1 - alpha) * grayscale.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    scores = np.asarray(grid.scores)
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("grid scores must be normalized to [0, 1] before rendering")
    scan = np.asarray(scan)
    if scan.shape[:2] != grid.scan_dims:
        raise ValueError(
            f"scan dims {scan.shape[:2]} do not match grid geometry {grid.scan_dims}"
        )
    gray = to_grayscale(scan).astype(np.float64)
    gray3 = np.repeat(gray, 3, axis=2)
    color = apply_colormap(_lattice_to_image(grid), colormap)
    return alpha * color + (1.0 - alpha) * gray3


def write_grid_csv(grid: HeatmapGrid, path: str | Path, comment: str = "") -> None:
    """Dump the lattice with indices and source pixel offsets."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "row_offset", "col_offset", "score"])
        for i, r_off in enumerate(grid.row_offsets):
            for j, c_off in enumerate(grid.col_offsets):
                writer.writerow([i, j, r_off, c_off, repr(float(grid.scores[i, j]))])


def save_overlay(image: np.ndarray, path: str | Path) -> None:
    """Write a rendered overlay as an 8-bit RGB file (deterministic bytes)."""
    save_image(image, path)
