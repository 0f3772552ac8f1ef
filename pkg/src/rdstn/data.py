"""Dataset ingestion, LR/HR pair synthesis and coordinate grids.

Images are ``torch.Tensor`` of shape ``(C, H, W)`` with values in [0, 1].
Coordinates follow the pixel-center convention on [-1, 1]: cell ``i`` of
``n`` sits at ``-1 + (2i + 1) / n``. Coordinate vectors are ordered
``(y, x)``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image as PILImage

IMAGE_SUFFIXES = (".png",)
DEFAULT_EXCLUDE = ("_mask",)


class EmptyDatasetError(ValueError):
    """Raised when a dataset directory or split has no usable images."""


class CropTooSmall(ValueError):
    """The source image cannot hold the requested HR crop; resample another."""


# ---------------------------------------------------------------------------
# Image I/O


def load_image(path: str | Path, channels: int = 1) -> torch.Tensor:
    """Decode a PNG into a float32 ``(C, H, W)`` tensor in [0, 1].

    8-bit data is divided by 255 and 16-bit data by 65535. RGB sources are
    converted to luma when ``channels == 1``; gray sources are replicated
    when ``channels == 3``.
    """
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0
            if channels == 3:
                arr = np.repeat(arr[..., None], 3, axis=-1)
        else:
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float64)
            peak = 255.0
    arr = np.clip(arr / peak, 0.0, 1.0)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


def save_image(img: torch.Tensor, path: str | Path) -> None:
    """Write a ``(C, H, W)`` image in [0, 1] as an 8-bit PNG."""
    arr = img.detach().cpu().double().clamp(0, 1).numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        PILImage.fromarray(arr[0], mode="L").save(path)
    else:
        PILImage.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def discover_images(
    root: str | Path, exclude: Sequence[str] = DEFAULT_EXCLUDE
) -> list[Path]:
    """All PNGs under ``root`` (recursive), sorted, skipping names containing
    any ``exclude`` token (BUSI ships segmentation masks beside images)."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDatasetError(f"not a directory: {root}")
    found = [
        p
        for p in root.rglob("*")
        if p.is_file()
        and p.suffix.lower() in IMAGE_SUFFIXES
        and not any(tok in p.stem for tok in exclude)
    ]
    return sorted(found)


# ---------------------------------------------------------------------------
# Coordinates


def make_coord_grid(
    h: int, w: int, dtype: torch.dtype = torch.float32, flatten: bool = False
) -> torch.Tensor:
    """Pixel-center coordinates of an ``h x w`` grid.

    Returns ``(h, w, 2)`` with ``[..., 0] = y`` and ``[..., 1] = x``, or
    ``(h*w, 2)`` in row-major order when ``flatten`` is set.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid dimensions must be positive, got {h}x{w}")
    ys = axis_centers(h, dtype)
    xs = axis_centers(w, dtype)
    grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1)
    return grid.reshape(-1, 2) if flatten else grid


def axis_centers(n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    idx = torch.arange(n, dtype=torch.float64)
    return (-1.0 + (2.0 * idx + 1.0) / n).to(dtype)


def coord_to_index(c: torch.Tensor | float, n: int) -> torch.Tensor:
    """Cell index containing coordinate ``c`` on an ``n``-cell axis."""
    c = torch.as_tensor(c, dtype=torch.float64)
    return torch.floor((c + 1.0) * n / 2.0).long().clamp(0, n - 1)


# ---------------------------------------------------------------------------
# Bicubic resampling


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric reflection (``d c b a | a b c d``), any depth."""
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def resize_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """Dense ``(n_out, n_in)`` bicubic resampling matrix for one axis.

    Output sample ``i`` reads the input at ``(i + 0.5) * n_in / n_out - 0.5``.
    When shrinking, the kernel is widened by the ratio (antialiasing);
    rows are normalized to sum to one.
    """
    scale = n_in / n_out
    support = 2.0 * max(scale, 1.0)
    stretch = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    left = np.floor(centers - support).astype(np.int64) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((centers[:, None] - idx) / stretch, a)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), reflect_index(idx, n_in).ravel()), weights.ravel())
    return mat


def downsample_bicubic(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Separable Catmull-Rom resample of a ``(C, H, W)`` image, clamped to [0, 1].

    Works in either direction; it is the LR synthesis kernel and the
    bicubic upscaling baseline.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.clamp(0, 1)
    mh = torch.from_numpy(resize_matrix(h, out_h))
    mw = torch.from_numpy(resize_matrix(w, out_w))
    out = torch.einsum("oh,chw,pw->cop", mh, img.double(), mw)
    return out.clamp(0, 1).to(img.dtype)


# ---------------------------------------------------------------------------
# Noise, splits, training pairs


def add_gaussian_noise(
    img: torch.Tensor, sigma: float, rng: np.random.Generator
) -> torch.Tensor:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return img.clone()
    noise = torch.from_numpy(rng.standard_normal(tuple(img.shape)) * sigma)
    return (img.double() + noise).clamp(0, 1).to(img.dtype)


@dataclass
class DatasetSplit:
    train_paths: list[str]
    test_paths: list[str]
    seed: int
    ratio: float
    root: str = "."

    def resolve(self, which: str = "train") -> list[Path]:
        paths = self.train_paths if which == "train" else self.test_paths
        return [Path(self.root) / p for p in paths]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "root": self.root,
            "train": list(self.train_paths),
            "test": list(self.test_paths),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(
            train_paths=list(obj["train"]),
            test_paths=list(obj["test"]),
            seed=int(obj["seed"]),
            ratio=float(obj["ratio"]),
            root=obj.get("root", "."),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def split_count(n: int, ratio: float) -> int:
    # guard against 0.8 * 10 landing a hair above 8
    return min(n, max(0, math.ceil(ratio * n - 1e-9)))


def split_dataset(
    directory: str | Path, ratio: float = 0.8, seed: int = 0
) -> DatasetSplit:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    root = Path(directory)
    files = discover_images(root)
    if not files:
        raise EmptyDatasetError(f"no images found under {root}")
    if len(files) < 2:
        raise EmptyDatasetError(f"need at least 2 images to split, found {len(files)}")
    rel = [p.relative_to(root).as_posix() for p in files]
    order = np.random.default_rng(seed).permutation(len(rel))
    shuffled = [rel[i] for i in order]
    n_train = split_count(len(rel), ratio)
    return DatasetSplit(
        train_paths=shuffled[:n_train],
        test_paths=shuffled[n_train:],
        seed=seed,
        ratio=ratio,
        root=str(root),
    )


@dataclass
class TrainingPair:
    lr_patch: torch.Tensor  # (C, p, p)
    query_coords: torch.Tensor  # (K, 2) in the HR-crop frame
    targets: torch.Tensor  # (K, C)
    scale: float
    hr_side: int = field(default=0)


def synthesize_training_pair(
    hr: torch.Tensor,
    patch: int,
    k_samples: int,
    scale: float,
    rng: np.random.Generator,
    augment: bool = False,
) -> TrainingPair:
    """Random HR crop of side ``round(scale * patch)``, bicubic-shrunk to
    ``patch x patch``, plus ``k_samples`` query pixels drawn without
    replacement from the crop."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    side = int(round(scale * patch))
    _, h, w = hr.shape
    if h < side or w < side:
        raise CropTooSmall(f"image {h}x{w} cannot hold a {side}x{side} crop")
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    crop = hr[:, y0 : y0 + side, x0 : x0 + side]
    if augment:
        if rng.random() < 0.5:
            crop = crop.flip(-1)
        if rng.random() < 0.5:
            crop = crop.flip(-2)
    lr = downsample_bicubic(crop, patch, patch)
    coords = make_coord_grid(side, side, flatten=True)
    values = crop.reshape(crop.shape[0], -1).t()
    k = min(k_samples, side * side)
    pick = torch.from_numpy(rng.choice(side * side, size=k, replace=False))
    return TrainingPair(
        lr_patch=lr.contiguous(),
        query_coords=coords[pick].contiguous(),
        targets=values[pick].contiguous(),
        scale=float(scale),
        hr_side=side,
    )


def sample_scale(rng: np.random.Generator, smin: float = 1.0, smax: float = 4.0) -> float:
    """Uniform draw from ``[smin, smax)``."""
    if not smin < smax:
        raise ValueError(f"scale bounds must satisfy smin < smax, got {smin}, {smax}")
    return float(rng.uniform(smin, smax))


def pair_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    """Independent stream per (seed, step, batch slot); worker-count agnostic."""
    return np.random.default_rng(np.random.SeedSequence([seed, step, slot]))


@dataclass
class Batch:
    lr: torch.Tensor  # (B, C, p, p)
    coords: torch.Tensor  # (B, K, 2)
    targets: torch.Tensor  # (B, K, C)
    scales: torch.Tensor  # (B,)
    cells: torch.Tensor  # (B, K, 2)

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(
            self.lr.to(dtype),
            self.coords.to(dtype),
            self.targets.to(dtype),
            self.scales.to(dtype),
            self.cells.to(dtype),
        )


def collate(pairs: Sequence[TrainingPair]) -> Batch:
    k = min(p.query_coords.shape[0] for p in pairs)
    cells = [
        torch.full((k, 2), 2.0 / p.hr_side, dtype=p.query_coords.dtype) for p in pairs
    ]
    return Batch(
        lr=torch.stack([p.lr_patch for p in pairs]),
        coords=torch.stack([p.query_coords[:k] for p in pairs]),
        targets=torch.stack([p.targets[:k] for p in pairs]),
        scales=torch.tensor([p.scale for p in pairs]),
        cells=torch.stack(cells),
    )


class PairSampler:
    """Deterministic batch source over a list of in-memory HR images.

    Batch ``step`` depends only on ``(seed, step)``, so resuming at any step
    or changing ``workers`` reproduces the same sequence.
    """

    def __init__(
        self,
        images: Sequence[torch.Tensor],
        patch: int,
        k_samples: int,
        batch: int,
        scale_min: float,
        scale_max: float,
        seed: int,
        augment: bool = False,
        workers: int = 0,
        max_retries: int = 32,
    ):
        if not images:
            raise EmptyDatasetError("no training images")
        self.images = list(images)
        self.patch = patch
        self.k_samples = k_samples
        self.batch = batch
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.seed = seed
        self.augment = augment
        self.workers = workers
        self.max_retries = max_retries

    def _pair(self, step: int, slot: int) -> TrainingPair:
        rng = pair_rng(self.seed, step, slot)
        for _ in range(self.max_retries):
            img = self.images[int(rng.integers(len(self.images)))]
            scale = sample_scale(rng, self.scale_min, self.scale_max)
            try:
                return synthesize_training_pair(
                    img, self.patch, self.k_samples, scale, rng, self.augment
                )
            except CropTooSmall:
                continue
        raise CropTooSmall(
            f"no image could hold a crop for patch {self.patch} after "
            f"{self.max_retries} draws; images are too small for scale_max={self.scale_max}"
        )

    def batch_at(self, step: int) -> Batch:
        slots = range(self.batch)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                pairs = list(pool.map(lambda s: self._pair(step, s), slots))
        else:
            pairs = [self._pair(step, s) for s in slots]
        return collate(pairs)

    def __iter__(self) -> Iterator[Batch]:
        step = 0
        while True:
            yield self.batch_at(step)
            step += 1
