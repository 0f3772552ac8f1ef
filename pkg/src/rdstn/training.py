"""Continuous-scale training, ablation settings and checkpoint plumbing."""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
from torch import nn

from .checkpoint import Checkpoint, check_config, load_checkpoint, save_checkpoint
from .data import Batch, DatasetSplit, EmptyDatasetError, PairSampler, load_image, sample_scale
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import RDSTN, ModelConfig, count_parameters

__all__ = [
    "AblationSetting",
    "DivergenceError",
    "FitResult",
    "TrainConfig",
    "apply_ablation_setting",
    "build_model",
    "count_parameters",
    "fit",
    "l1_loss",
    "load_model",
    "lr_at",
    "sample_scale",
    "train_step",
]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class AblationSetting(enum.Enum):
    S1 = (False, False)
    S2 = (False, True)
    S3 = (True, False)
    S4 = (True, True)

    @property
    def lff(self) -> bool:
        return self.value[0]

    @property
    def gff(self) -> bool:
        return self.value[1]

    @classmethod
    def parse(cls, name: "str | AblationSetting") -> "AblationSetting":
        if isinstance(name, cls):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown ablation setting {name!r}; expected one of S1, S2, S3, S4") from None


def apply_ablation_setting(setting: "str | AblationSetting", config: EncoderConfig) -> EncoderConfig:
    setting = AblationSetting.parse(setting)
    return dataclasses.replace(config, use_lff=setting.lff, use_gff=setting.gff)


@dataclass
class TrainConfig:
    # data
    data_dir: str = ""
    manifest: str = ""
    split_ratio: float = 0.8
    split_seed: int = 0
    channels: int = 1
    # encoder
    dim: int = 120
    num_stages: int = 4
    blocks_per_stage: int = 6
    window_size: int = 8
    num_heads: int = 6
    mlp_ratio: float = 2.0
    ablation: str = "S4"
    # decoder
    decoder_hidden: list[int] = field(default_factory=lambda: [256, 256, 256, 256])
    local_ensemble: bool = True
    cell_decode: bool = False
    feat_unfold: bool = False
    query_batch: int = 30000
    # sampling
    scale_min: float = 1.0
    scale_max: float = 4.0
    patch: int = 48
    k_samples: int = 2304
    batch: int = 16
    augment: bool = False
    workers: int = 0
    # optimization
    steps: int = 1000
    lr: float = 1e-4
    lr_milestones: list[float] = field(default_factory=lambda: [0.5, 0.75, 0.9])
    lr_gamma: float = 0.5
    seed: int = 0
    # bookkeeping
    out_dir: str = "runs/rdstn"
    eval_every: int = 0
    eval_scales: list[float] = field(default_factory=lambda: [2.0, 3.0, 4.0])
    eval_max_images: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 1.0 <= self.scale_min < self.scale_max:
            raise ValueError(f"need 1 <= scale_min < scale_max, got {self.scale_min}, {self.scale_max}")
        for name in ("patch", "k_samples", "batch", "steps", "dim", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        AblationSetting.parse(self.ablation)

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(
            in_channels=self.channels,
            dim=self.dim,
            num_stages=self.num_stages,
            blocks_per_stage=self.blocks_per_stage,
            window_size=self.window_size,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
        )
        dec = DecoderConfig(
            hidden=tuple(self.decoder_hidden),
            out_channels=self.channels,
            local_ensemble=self.local_ensemble,
            cell_decode=self.cell_decode,
            feat_unfold=self.feat_unfold,
            query_batch=self.query_batch,
        )
        return ModelConfig(apply_ablation_setting(self.ablation, enc), dec)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# Core steps


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def lr_at(config: TrainConfig, step: int) -> float:
    """Step decay: multiply by ``lr_gamma`` at each milestone fraction of ``steps``."""
    passed = sum(step >= int(round(m * config.steps)) for m in config.lr_milestones)
    return config.lr * config.lr_gamma**passed


def batch_loss(model: RDSTN, batch: Batch) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    batch = batch.to(dtype)
    cells = batch.cells if model.config.decoder.cell_decode else None
    pred = model(batch.lr, batch.coords, cells)
    return l1_loss(pred, batch.targets)


def train_step(
    model: RDSTN, batch: Batch, optimizer: torch.optim.Optimizer, lr: float | None = None
) -> float:
    """One optimizer update on ``batch``; returns the pre-update L1 loss."""
    model.train()
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    value = float(loss.detach())
    if not math.isfinite(value):
        worst = max((float(p.detach().abs().max()) for p in model.parameters()), default=0.0)
        raise DivergenceError(f"non-finite loss {value} (max |param| = {worst:.3g})")
    loss.backward()
    optimizer.step()
    return value


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr)


def build_model(config: ModelConfig, seed: int = 0) -> RDSTN:
    torch.manual_seed(seed)
    return RDSTN(config)


# ---------------------------------------------------------------------------
# Checkpoint <-> model


def snapshot(
    model: RDSTN,
    optimizer: torch.optim.Optimizer | None,
    train_config: TrainConfig | None,
    step: int,
    history: list,
) -> Checkpoint:
    arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    opt_meta = {}
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, st in state["state"].items():
            for key, val in st.items():
                arrays[f"optim.{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        opt_meta = {"param_groups": state["param_groups"]}
    return Checkpoint(
        arrays=arrays,
        model_config=model.config.to_dict(),
        train_config=train_config.to_dict() if train_config else {},
        step=step,
        history=list(history),
        optimizer_meta=opt_meta,
    )


def restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    state: dict[int, dict] = {}
    for name, arr in ckpt.arrays.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    groups = ckpt.optimizer_meta.get("param_groups")
    if groups is None:
        return
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def load_model(path: str | Path, expected: ModelConfig | None = None) -> tuple[RDSTN, Checkpoint]:
    """Rebuild the network stored in a checkpoint."""
    ckpt = load_checkpoint(path, expected.to_dict() if expected else None)
    model = RDSTN(ModelConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.model_state())
    model.eval()
    return model, ckpt


# ---------------------------------------------------------------------------
# Fit


@dataclass
class FitResult:
    last: Path
    best: Path
    losses: list[float]
    history: list[dict]
    checksum: str


def load_split_images(paths, channels: int) -> list[torch.Tensor]:
    images = []
    for p in paths:
        try:
            images.append(load_image(p, channels))
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
    return images


def fit(
    config: TrainConfig,
    split: DatasetSplit,
    out_dir: str | Path | None = None,
    resume: bool = False,
    stop_at: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> FitResult:
    """Train per ``config``; writes ``last.ckpt``, ``best.ckpt`` and ``train_log.jsonl``.

    ``resume`` continues from ``out_dir/last.ckpt``. ``stop_at`` ends the
    run early (after that many total steps) as if interrupted.
    """
    from .evaluation import mean_psnr_over_scales

    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_images = load_split_images(split.resolve("train"), config.channels)
    if not train_images:
        raise EmptyDatasetError("training split has no readable images")
    test_images = load_split_images(split.resolve("test"), config.channels)
    if config.eval_max_images:
        test_images = test_images[: config.eval_max_images]

    model_config = config.model_config()
    model = build_model(model_config, config.seed)
    optimizer = make_optimizer(model, config.lr)
    sampler = PairSampler(
        train_images,
        config.patch,
        config.k_samples,
        config.batch,
        config.scale_min,
        config.scale_max,
        config.seed,
        augment=config.augment,
        workers=config.workers,
    )

    start = 0
    history: list[dict] = []
    best_score = -math.inf
    last_path = out / "last.ckpt"
    best_path = out / "best.ckpt"
    log_path = out / "train_log.jsonl"
    if resume:
        ckpt = load_checkpoint(last_path)
        check_config(ckpt.model_config, model_config.to_dict())
        model.load_state_dict(ckpt.model_state())
        restore_optimizer(optimizer, ckpt)
        start = ckpt.step
        history = list(ckpt.history)
        best_score = max((h["psnr"] for h in history if "psnr" in h), default=-math.inf)
    else:
        log_path.write_text("")

    eval_pool = test_images or train_images

    def evaluate(step: int) -> None:
        nonlocal best_score
        score = mean_psnr_over_scales(model, eval_pool, config.eval_scales)
        entry = {"step": step, "psnr": score}
        history.append(entry)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
        if score > best_score:
            best_score = score
            save_checkpoint(best_path, snapshot(model, None, config, step, history))

    losses: list[float] = []
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    for step in range(start, end):
        loss = train_step(model, sampler.batch_at(step), optimizer, lr_at(config, step))
        losses.append(loss)
        if on_step:
            on_step(step, loss)
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            with open(log_path, "a") as fh:
                fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
            log.info("step %d loss %.5f", step, loss)
        if config.eval_every and (step + 1) % config.eval_every == 0 and step + 1 < config.steps:
            evaluate(step + 1)

    if end == config.steps and (not history or history[-1]["step"] != end):
        evaluate(end)
    checksum = save_checkpoint(last_path, snapshot(model, optimizer, config, end, history))
    if not best_path.exists():
        save_checkpoint(best_path, snapshot(model, None, config, end, history))
    return FitResult(last_path, best_path, losses, history, checksum)
