"""The assembled network and whole-image arbitrary-scale upscaling."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .data import make_coord_grid
from .decoder import DecoderConfig, LEIRUDecoder
from .encoder import EncoderConfig, RDSTEncoder


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.decoder.out_channels != self.encoder.in_channels:
            raise ValueError(
                f"decoder emits {self.decoder.out_channels} channels but the encoder "
                f"reads {self.encoder.in_channels}"
            )

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        enc = dict(obj.get("encoder", {}))
        dec = dict(obj.get("decoder", {}))
        if "hidden" in dec:
            dec["hidden"] = tuple(dec["hidden"])
        return cls(EncoderConfig(**enc), DecoderConfig(**dec))


class RDSTN(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.encoder = RDSTEncoder(config.encoder)
        self.decoder = LEIRUDecoder(config.encoder.dim, config.decoder)

    def encode(self, lr: torch.Tensor) -> torch.Tensor:
        return self.decoder.prepare(self.encoder(lr))

    def query(self, grid, coords, cells=None, local_ensemble=None, batch_size=None):
        """Decode ``coords`` ``(B, Q, 2)`` in chunks of at most ``batch_size`` queries."""
        bs = batch_size or self.config.decoder.query_batch
        q = coords.shape[1]
        if q <= bs:
            return self.decoder(grid, coords, cells, local_ensemble)
        chunks = []
        for start in range(0, q, bs):
            sl = slice(start, start + bs)
            cell = None if cells is None else cells[:, sl]
            chunks.append(self.decoder(grid, coords[:, sl], cell, local_ensemble))
        return torch.cat(chunks, dim=1)

    def forward(self, lr, coords, cells=None):
        return self.query(self.encode(lr), coords, cells)


@torch.no_grad()
def upscale(
    model: RDSTN,
    img: torch.Tensor,
    target_h: int,
    target_w: int,
    use_ensemble: bool = True,
    batch_size: int | None = None,
) -> torch.Tensor:
    """Super-resolve a ``(C, H, W)`` image to ``target_h x target_w``, clamped to [0, 1]."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    dtype = next(model.parameters()).dtype
    lr = img.to(dtype).unsqueeze(0)
    grid = model.encode(lr)
    coords = make_coord_grid(target_h, target_w, dtype=dtype, flatten=True).unsqueeze(0)
    cells = torch.empty_like(coords)
    cells[..., 0] = 2.0 / target_h
    cells[..., 1] = 2.0 / target_w
    out = model.query(grid, coords, cells, local_ensemble=use_ensemble, batch_size=batch_size)
    out = out[0].t().reshape(-1, target_h, target_w)
    return out.clamp(0, 1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
