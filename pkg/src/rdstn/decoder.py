"""Implicit-representation decoder over a latent grid.

A query coordinate is decoded by an MLP fed with a latent code and the
query's offset from that code's center. ``decode_point`` uses the single
nearest code; ``local_ensemble_decode`` blends the four surrounding codes
with bilinear (opposite-rectangle area) weights so the output stays
continuous across cell boundaries.

Latent grids are ``(B, d, h, w)``; queries are ``(B, Q, 2)`` in ``(y, x)``
order on [-1, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

MIN_ROWS = 16


@dataclass(frozen=True)
class DecoderConfig:
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    out_channels: int = 1
    local_ensemble: bool = True
    cell_decode: bool = False
    feat_unfold: bool = False
    query_batch: int = 30000

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class MLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int]):
        super().__init__()
        layers: list[nn.Module] = []
        last = in_dim
        for h in hidden:
            layers += [nn.Linear(last, h), nn.ReLU()]
            last = h
        layers.append(nn.Linear(last, out_dim))
        self.layers = nn.Sequential(*layers)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape[:-1]
        rows = x.reshape(-1, x.shape[-1])
        n = rows.shape[0]
        # tiny matmuls take a different BLAS path; pad so query chunking stays bit-exact
        if 0 < n < MIN_ROWS:
            rows = torch.cat([rows, rows.new_zeros(MIN_ROWS - n, rows.shape[1])])
        return self.layers(rows)[:n].view(*shape, -1)


# ---------------------------------------------------------------------------
# Geometry


def nearest_index(q: torch.Tensor, n: int) -> torch.Tensor:
    """Index of the cell containing ``q`` on an ``n``-cell axis.

    A query on a shared cell edge goes to the lower index.
    """
    return (torch.ceil((q + 1.0) * n / 2.0) - 1).long().clamp(0, n - 1)


def cell_center(idx: torch.Tensor, n: int, dtype: torch.dtype) -> torch.Tensor:
    return -1.0 + (2.0 * idx.to(dtype) + 1.0) / n


def nearest_latent(grid: torch.Tensor, q: torch.Tensor):
    """Nearest code and its center for each query.

    ``grid`` is ``(B, d, h, w)``, ``q`` is ``(B, Q, 2)``. Returns codes
    ``(B, Q, d)`` and centers ``(B, Q, 2)``.
    """
    h, w = grid.shape[-2:]
    iy = nearest_index(q[..., 0], h)
    ix = nearest_index(q[..., 1], w)
    codes = gather_codes(grid, iy, ix)
    centers = torch.stack([cell_center(iy, h, q.dtype), cell_center(ix, w, q.dtype)], dim=-1)
    return codes, centers


def gather_codes(grid: torch.Tensor, iy: torch.Tensor, ix: torch.Tensor) -> torch.Tensor:
    b, d, h, w = grid.shape
    flat = grid.reshape(b, d, h * w)
    lin = (iy * w + ix).unsqueeze(1).expand(-1, d, -1)
    return torch.gather(flat, 2, lin).transpose(1, 2)


def ensemble_weights(q: torch.Tensor, h: int, w: int):
    """Corner indices and bilinear weights of the four surrounding centers.

    Returns ``(iy, ix, weights)`` each shaped ``(..., 4)`` with corners
    ordered (top-left, top-right, bottom-left, bottom-right). Indices are
    clamped at the border, so edge queries put all their weight on
    duplicated corners; weights always sum to 1.
    """
    uy = (q[..., 0] + 1.0) * h / 2.0 - 0.5
    ux = (q[..., 1] + 1.0) * w / 2.0 - 0.5
    y0 = torch.floor(uy)
    x0 = torch.floor(ux)
    ty = uy - y0
    tx = ux - x0
    y0 = y0.long()
    x0 = x0.long()
    y1 = (y0 + 1).clamp(0, h - 1)
    x1 = (x0 + 1).clamp(0, w - 1)
    y0 = y0.clamp(0, h - 1)
    x0 = x0.clamp(0, w - 1)
    # weight of a corner = area of the rectangle spanned by q and the opposite corner
    weights = torch.stack(
        [(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx], dim=-1
    )
    iy = torch.stack([y0, y0, y1, y1], dim=-1)
    ix = torch.stack([x0, x1, x0, x1], dim=-1)
    return iy, ix, weights


# ---------------------------------------------------------------------------
# Decoder


class LEIRUDecoder(nn.Module):
    def __init__(self, latent_dim: int, config: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.config = config
        in_dim = latent_dim * (9 if config.feat_unfold else 1) + 2
        if config.cell_decode:
            in_dim += 2
        self.mlp = MLP(in_dim, config.out_channels, config.hidden)

    def prepare(self, grid: torch.Tensor) -> torch.Tensor:
        if self.config.feat_unfold:
            b, d, h, w = grid.shape
            return F.unfold(grid, 3, padding=1).view(b, d * 9, h, w)
        return grid

    def _decode(self, grid, codes, centers, q, cell):
        h, w = grid.shape[-2:]
        scale = torch.tensor([h, w], dtype=q.dtype, device=q.device)
        parts = [codes, (q - centers) * scale]
        if self.config.cell_decode:
            if cell is None:
                raise ValueError("cell_decode is enabled but no cell sizes were given")
            parts.append(cell * scale)
        return self.mlp(torch.cat(parts, dim=-1))

    def decode_point(self, grid, q, cell=None):
        codes, centers = nearest_latent(grid, q)
        return self._decode(grid, codes, centers, q, cell)

    def local_ensemble_decode(self, grid, q, cell=None):
        h, w = grid.shape[-2:]
        iy, ix, weights = ensemble_weights(q, h, w)
        out = 0
        for k in range(4):
            codes = gather_codes(grid, iy[..., k], ix[..., k])
            centers = torch.stack(
                [cell_center(iy[..., k], h, q.dtype), cell_center(ix[..., k], w, q.dtype)], dim=-1
            )
            out = out + weights[..., k : k + 1] * self._decode(grid, codes, centers, q, cell)
        return out

    def forward(self, grid, q, cell=None, local_ensemble: bool | None = None):
        """Decode ``q`` against an already-prepared latent grid."""
        ensemble = self.config.local_ensemble if local_ensemble is None else local_ensemble
        if ensemble:
            return self.local_ensemble_decode(grid, q, cell)
        return self.decode_point(grid, q, cell)
