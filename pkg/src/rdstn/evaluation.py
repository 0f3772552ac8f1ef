"""PSNR benchmarking: bicubic and learned upscaling over scale sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (
    DatasetSplit,
    EmptyDatasetError,
    add_gaussian_noise,
    discover_images,
    downsample_bicubic,
    load_image,
)
from .model import RDSTN, upscale

log = logging.getLogger(__name__)

METHODS = ("bicubic", "rdstn")
CSV_FIELDS = ("method", "scale", "psnr_db", "n_images", "sigma")


def psnr(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """PSNR in dB for peak 1.0; ``inf`` when the images are identical."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    mse = float(torch.mean((pred.double() - gt.double()) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def scaled_size(dim: int, scale: float) -> int:
    return max(1, int(round(dim / scale)))


@dataclass
class Row:
    method: str
    scale: float
    psnr_db: float
    n_images: int
    sigma: float = 0.0

    @property
    def identical(self) -> bool:
        return math.isinf(self.psnr_db)


@dataclass
class BenchmarkTable:
    rows: list[Row] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def cell(self, method: str, scale: float) -> Row:
        for r in self.rows:
            if r.method == method and math.isclose(r.scale, scale):
                return r
        raise KeyError((method, scale))

    def extend(self, other: "BenchmarkTable") -> "BenchmarkTable":
        self.rows.extend(other.rows)
        for k, v in other.metadata.items():
            self.metadata.setdefault(k, v)
        self.sort()
        return self

    def sort(self) -> None:
        self.rows.sort(key=lambda r: (r.method, r.scale))

    def best_flags(self) -> dict[tuple[str, float], bool]:
        flags = {}
        for scale in sorted({r.scale for r in self.rows}):
            group = [r for r in self.rows if r.scale == scale]
            top = max(r.psnr_db for r in group)
            for r in group:
                flags[(r.method, r.scale)] = r.psnr_db == top
        return flags

    def to_json(self) -> dict:
        flags = self.best_flags()
        return {
            "metadata": self.metadata,
            "rows": [
                {
                    "method": r.method,
                    "scale": r.scale,
                    "psnr_db": None if r.identical else r.psnr_db,
                    "identical": r.identical,
                    "n_images": r.n_images,
                    "sigma": r.sigma,
                    "best": flags[(r.method, r.scale)],
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BenchmarkTable":
        rows = [
            Row(
                method=r["method"],
                scale=float(r["scale"]),
                psnr_db=math.inf if r.get("identical") else float(r["psnr_db"]),
                n_images=int(r["n_images"]),
                sigma=float(r.get("sigma", 0.0)),
            )
            for r in obj["rows"]
        ]
        return cls(rows, dict(obj.get("metadata", {})))


# ---------------------------------------------------------------------------
# Sweeps


def _noise_rng(seed: int, image_idx: int, scale: float) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, image_idx, int(round(scale * 1000))]))


def super_resolve(method: str, lr: torch.Tensor, h: int, w: int, model: RDSTN | None = None) -> torch.Tensor:
    if method == "bicubic":
        return downsample_bicubic(lr, h, w)
    if model is None:
        raise ValueError(f"method {method!r} needs a model")
    return upscale(model, lr, h, w).to(lr.dtype)


def evaluate_image(
    img: torch.Tensor,
    scale: float,
    method: str,
    model: RDSTN | None = None,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> float:
    _, h, w = img.shape
    lr = downsample_bicubic(img, scaled_size(h, scale), scaled_size(w, scale))
    if noise_sigma > 0:
        lr = add_gaussian_noise(lr, noise_sigma, rng or np.random.default_rng(0))
    return psnr(super_resolve(method, lr, h, w, model), img)


def sweep_images(
    images: Sequence[torch.Tensor],
    method: str,
    scales: Sequence[float],
    model: RDSTN | None = None,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> list[Row]:
    if method not in METHODS and model is None:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if not images:
        raise EmptyDatasetError("no images to evaluate")
    if model is not None:
        model.eval()
    rows = []
    for scale in scales:
        if scale < 1:
            raise ValueError(f"scales must be >= 1, got {scale}")
        values = [
            evaluate_image(img, scale, method, model, noise_sigma, _noise_rng(seed, i, scale))
            for i, img in enumerate(images)
        ]
        rows.append(Row(method, float(scale), float(np.mean(values)), len(values), float(noise_sigma)))
    return rows


def load_images(paths: Sequence[Path], channels: int = 1) -> tuple[list[torch.Tensor], int]:
    """Load in filename order; returns the images and how many were skipped."""
    images, skipped = [], 0
    for p in sorted(paths, key=lambda p: Path(p).name):
        try:
            images.append(load_image(p, channels))
        except OSError as exc:
            skipped += 1
            log.warning("skipping unreadable image %s: %s", p, exc)
    return images, skipped


def eval_scale_sweep(
    method: str,
    split: DatasetSplit | Sequence[Path],
    scales: Sequence[float],
    model: RDSTN | None = None,
    noise_sigma: float = 0.0,
    seed: int = 0,
    channels: int = 1,
    label: str | None = None,
) -> BenchmarkTable:
    """Mean PSNR per scale over the test split (or an explicit path list)."""
    if isinstance(split, DatasetSplit):
        paths = split.resolve("test")
        meta = {"dataset": split.root, "split_seed": split.seed}
    else:
        paths = list(split)
        meta = {}
    images, skipped = load_images(paths, channels)
    if not images:
        raise EmptyDatasetError("evaluation split is empty")
    rows = sweep_images(images, method, scales, model, noise_sigma, seed)
    if label:
        for r in rows:
            r.method = label
    meta.update({"noise_sigma": float(noise_sigma), "skipped_images": skipped})
    table = BenchmarkTable(rows, meta)
    table.sort()
    return table


def generalization_eval(
    method: str,
    directory: str | Path,
    scales: Sequence[float] = (1.6, 1.7, 1.8, 1.9, 2.0),
    model: RDSTN | None = None,
    noise_sigma: float = 0.0,
    channels: int = 1,
) -> BenchmarkTable:
    """Same protocol as :func:`eval_scale_sweep` with every file in ``directory`` as test data."""
    paths = discover_images(directory)
    if not paths:
        raise EmptyDatasetError(f"no images found under {directory}")
    table = eval_scale_sweep(method, paths, scales, model, noise_sigma, channels=channels)
    table.metadata["dataset"] = str(directory)
    return table


def mean_psnr_over_scales(model: RDSTN, images: Sequence[torch.Tensor], scales: Sequence[float]) -> float:
    rows = sweep_images(images, "rdstn", scales, model)
    return float(np.mean([r.psnr_db for r in rows]))


# ---------------------------------------------------------------------------
# Reports


def emit_report(table: BenchmarkTable, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``; returns both paths."""
    if not table.rows:
        raise ValueError("refusing to write an empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    json_path = out / f"{stem}.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in table.rows:
            db = "inf" if r.identical else f"{r.psnr_db:.4f}"
            writer.writerow([r.method, f"{r.scale:g}", db, r.n_images, f"{r.sigma:g}"])
    json_path.write_text(json.dumps(table.to_json(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_report(path: str | Path) -> BenchmarkTable:
    return BenchmarkTable.from_json(json.loads(Path(path).read_text()))
