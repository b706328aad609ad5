"""Dataset ingestion, dense tile scoring, and a synthetic blur-ramp generator.

The engine consumes pre-extracted raster tiles (8-bit RGB PNG/JPEG/TIFF/...),
never slide container formats. Datasets are described by manifest CSVs:

    # kind=Z_LEVEL
    id,image_path,label,tag
    s0001,tiles/s0001.png,3,he

Z_LEVEL manifests carry integer focus labels 0..14 (0 = in focus); BINARY
manifests carry 0/1 with 1 = in-focus, matching the public evaluation set.
Relative image paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .metrics import KIND_BINARY, KIND_Z_LEVEL
from .model import INPUT_SIZE, ModelParams, forward

MANIFEST_HEADER = ("id", "image_path", "label", "tag")
Z_LEVEL_MAX = 14
DENSE_STRIDE = 128

#: tile caches stop growing past this many bytes of decoded pixels
DEFAULT_CACHE_BYTES = 1 << 30


class ManifestError(ValueError):
    """Malformed manifest; the message carries the offending line number."""


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    label: float
    tag: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    kind: str
    records: tuple[SampleRecord, ...]
    source: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.float64)


def _parse_label(kind: str, text: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ManifestError(f"line {lineno}: non-numeric label {text!r}") from None
    if kind == KIND_Z_LEVEL:
        if value != int(value) or not 0 <= value <= Z_LEVEL_MAX:
            raise ManifestError(
                f"line {lineno}: z-level must be an integer in [0, {Z_LEVEL_MAX}], got {text!r}"
            )
    elif value not in (0.0, 1.0):
        raise ManifestError(f"line {lineno}: binary label must be 0 or 1, got {text!r}")
    return value


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest CSV; raises ManifestError with a line number on defects."""
    path = Path(path)
    kind = None
    header_seen = False
    records: list[SampleRecord] = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if line.lstrip().startswith("#"):
                stripped = line.lstrip("# ").strip()
                if stripped.startswith("kind="):
                    kind = stripped[len("kind="):].strip()
                    if kind not in (KIND_Z_LEVEL, KIND_BINARY):
                        raise ManifestError(f"line {lineno}: unknown kind {kind!r}")
                continue
            fields = next(csv.reader(io.StringIO(line)))
            if not header_seen:
                if tuple(f.strip() for f in fields) != MANIFEST_HEADER:
                    raise ManifestError(
                        f"line {lineno}: header must be {','.join(MANIFEST_HEADER)}"
                    )
                if kind is None:
                    raise ManifestError(
                        f"line {lineno}: missing '# kind=Z_LEVEL|BINARY' before header"
                    )
                header_seen = True
                continue
            if len(fields) != len(MANIFEST_HEADER):
                raise ManifestError(
                    f"line {lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(fields)}"
                )
            sample_id, image_path, label_text, tag = fields
            if not image_path.strip():
                raise ManifestError(f"line {lineno}: empty image path")
            records.append(
                SampleRecord(
                    id=sample_id.strip(),
                    image_path=image_path.strip(),
                    label=_parse_label(kind, label_text.strip(), lineno),
                    tag=tag.strip(),
                )
            )
    if not header_seen:
        raise ManifestError("missing header row")
    return DatasetManifest(kind=kind, records=tuple(records), source=str(path))


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# kind={manifest.kind}\n")
        fh.write(",".join(MANIFEST_HEADER) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for r in manifest.records:
            label = int(r.label) if r.label == int(r.label) else r.label
            writer.writerow([r.id, r.image_path, label, r.tag])


def load_image(path: str | Path) -> np.ndarray:
    """Decode a raster tile to a float32 (H, W, 3) array in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / np.float32(255.0)


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a float image in [0, 1] as an 8-bit RGB (or grayscale) file."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


class TileStore:
    """Loads tiles for manifest records, caching decoded pixels up to a budget.

    Paths are resolved against `root` when relative. The cache never evicts;
    once the budget is reached further tiles are decoded on every access.
    """

    def __init__(self, root: str | Path = "", cache_bytes: int = DEFAULT_CACHE_BYTES):
        self.root = Path(root) if root else None
        self.cache_bytes = cache_bytes
        self._cache: dict[str, np.ndarray] = {}
        self._cached_bytes = 0

    def _resolve(self, image_path: str) -> Path:
        p = Path(image_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def get(self, record: SampleRecord) -> np.ndarray:
        key = record.image_path
        tile = self._cache.get(key)
        if tile is None:
            tile = load_image(self._resolve(key))
            if self._cached_bytes + tile.nbytes <= self.cache_bytes:
                self._cache[key] = tile
                self._cached_bytes += tile.nbytes
        return tile


def store_for(manifest: DatasetManifest, cache_bytes: int = DEFAULT_CACHE_BYTES) -> TileStore:
    """TileStore rooted at the manifest's directory."""
    root = Path(manifest.source).parent if manifest.source else ""
    return TileStore(root=root, cache_bytes=cache_bytes)


def crop_positions(length: int, crop: int = INPUT_SIZE, stride: int = DENSE_STRIDE) -> list[int]:
    """Top-left offsets of dense crops along one axis.

    Regular positions advance by `stride`; when the last one leaves a border
    remainder uncovered, a final position clamped to `length - crop` is added
    so every pixel falls inside at least one crop. A 1024-pixel axis therefore
    yields 8 positions (0, 128, ..., 768, 789), not 7.
    """
    if length < crop:
        raise ValueError(f"axis length {length} smaller than crop size {crop}")
    positions = list(range(0, length - crop + 1, stride))
    if positions[-1] + crop < length:
        positions.append(length - crop)
    return positions


def dense_score(
    params: ModelParams,
    tile: np.ndarray,
    stride: int = DENSE_STRIDE,
    threads: int = 1,
    on_crop: Callable[[], None] | None = None,
) -> float:
    """Mean forward score over all dense 235x235 crops of a tile.

    Crop positions follow crop_positions() on each axis. The mean is taken in
    a fixed index order, so results are bit-identical for any thread count.
    `on_crop` fires once per scored crop (used by the benchmark harness to
    verify call counts).
    """
    tile = np.asarray(tile)
    if tile.ndim != 3:
        raise ValueError(f"tile must be (H, W, C), got shape {tile.shape}")
    rows = crop_positions(tile.shape[0], INPUT_SIZE, stride)
    cols = crop_positions(tile.shape[1], INPUT_SIZE, stride)

    def score_at(pos: tuple[int, int]) -> float:
        r, c = pos
        value = forward(params, tile[r : r + INPUT_SIZE, c : c + INPUT_SIZE])
        if on_crop is not None:
            on_crop()
        return value

    positions = [(r, c) for r in rows for c in cols]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score_at, positions))
    else:
        scores = [score_at(p) for p in positions]
    return float(np.mean(scores))


def score_manifest(
    params: ModelParams,
    manifest: DatasetManifest,
    store: TileStore | None = None,
    stride: int = DENSE_STRIDE,
    threads: int = 1,
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Dense-score every record; returns (ids, scores, labels)."""
    store = store if store is not None else store_for(manifest)
    ids, scores = [], []
    for record in manifest.records:
        ids.append(record.id)
        scores.append(dense_score(params, store.get(record), stride, threads))
    return ids, np.asarray(scores), manifest.labels()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3*sigma and renormalized.

    sigma = 0 returns an unchanged copy. Borders use reflect padding.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    radius = int(3 * sigma)
    if radius == 0:
        return image.copy()
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    kernel = kernel.astype(image.dtype)

    out = np.pad(image, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    out = sum(kernel[i] * out[i : i + image.shape[0]] for i in range(len(kernel)))
    out = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = sum(kernel[i] * out[:, i : i + image.shape[1]] for i in range(len(kernel)))
    return out


def make_textures(count: int, size: int, seed: int) -> list[np.ndarray]:
    """Procedural high-frequency test textures: mixed noise, stripes, checks.

    Deterministic for a given seed; every texture has broad spatial-frequency
    content so defocus blur measurably attenuates it.
    """
    if count < 1 or size < 1:
        raise ValueError("count and size must be positive")
    rng = np.random.default_rng(seed)
    textures = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(count):
        noise = rng.random((size, size, 3))
        period = float(rng.integers(4, 17))
        angle = rng.uniform(0, np.pi)
        waves = 0.5 + 0.5 * np.sin(
            2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period
        )
        check = ((yy // period).astype(int) + (xx // period).astype(int)) % 2
        mix = rng.dirichlet(np.ones(3))
        tex = (
            mix[0] * noise
            + mix[1] * waves[..., None]
            + mix[2] * check[..., None].astype(np.float64)
        )
        lo, hi = tex.min(), tex.max()
        textures.append(((tex - lo) / (hi - lo)).astype(np.float32))
    return textures


def synth_blur_dataset(
    textures: Sequence[np.ndarray],
    sigma_levels: Sequence[float],
    out_dir: str | Path,
    kind: str = KIND_Z_LEVEL,
) -> DatasetManifest:
    """Blur each texture at each sigma and write tiles plus a manifest.

    Labels are sigma indices (position in the ascending sigma list). The
    manifest lands at out_dir/manifest.csv with tiles alongside it.
    """
    if not textures:
        raise ValueError("need at least one texture")
    sigmas = list(sigma_levels)
    if not sigmas or any(s < 0 for s in sigmas) or sorted(sigmas) != sigmas:
        raise ValueError("sigma levels must be non-negative and ascending")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for t_idx, texture in enumerate(textures):
        for s_idx, sigma in enumerate(sigmas):
            name = f"tex{t_idx:03d}_sigma{s_idx:02d}.png"
            save_image(gaussian_blur(texture, sigma), out_dir / name)
            records.append(
                SampleRecord(
                    id=f"tex{t_idx:03d}_s{s_idx:02d}",
                    image_path=name,
                    label=float(s_idx),
                    tag=f"sigma={sigma}",
                )
            )
    manifest = DatasetManifest(
        kind=kind, records=tuple(records), source=str(out_dir / "manifest.csv")
    )
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def split_dataset(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[DatasetManifest, ...]:
    """Seeded shuffle then contiguous partition into len(fractions) manifests.

    Splits are disjoint and exhaustive; sizes are the rounded fractions of the
    record count (within one sample of exact).
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(manifest.records)
    if n < len(fractions):
        raise ValueError(f"{n} records cannot fill {len(fractions)} splits")
    order = np.random.default_rng(seed).permutation(n)
    bounds = [0]
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        bounds.append(int(round(acc * n)))
    bounds.append(n)
    parts = []
    for i in range(len(fractions)):
        idx = order[bounds[i] : bounds[i + 1]]
        parts.append(replace(manifest, records=tuple(manifest.records[j] for j in idx)))
    return tuple(parts)
