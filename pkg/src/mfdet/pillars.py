"""Dynamic pillar voxelization and per-pillar learned features.

Points are binned into infinite-height BEV columns with no per-pillar
cap (every in-range point keeps its pillar), featurized by a shared
per-point MLP, max-pooled per pillar, and scattered onto a dense grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class PillarGrid:
    """BEV voxelization extents and resolution.

    Defaults follow the full-scale setup (153.6 m square, 512x512
    pillars of 0.3 m); desk-scale runs shrink the extent while keeping
    the same pillar size.
    """

    x_min: float = -76.8
    x_max: float = 76.8
    y_min: float = -76.8
    y_max: float = 76.8
    z_min: float = -2.0
    z_max: float = 4.0
    nx: int = 512
    ny: int = 512

    def __post_init__(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min or self.z_max <= self.z_min:
            raise ValueError("grid extents must be non-empty")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid resolution must be at least 1x1")

    @property
    def sx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def sy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    def cell_centers(self, stride: int = 1) -> np.ndarray:
        """Centers of (nx/stride, ny/stride, 2) feature-map cells."""
        nx, ny = self.nx // stride, self.ny // stride
        xs = self.x_min + (np.arange(nx) + 0.5) * self.sx * stride
        ys = self.y_min + (np.arange(ny) + 0.5) * self.sy * stride
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)


@dataclass
class PillarAssignment:
    """Result of binning one point cloud."""

    keep: np.ndarray  # (N,) bool, in-range mask over the input points
    cells: np.ndarray  # (M, 2) int64 pillar index per kept point
    num_discarded: int


def pillarize(points, grid: PillarGrid) -> PillarAssignment:
    """Assign each in-range point to exactly one pillar; drop the rest."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.size and not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    keep = (
        (pts[:, 0] >= grid.x_min)
        & (pts[:, 0] < grid.x_max)
        & (pts[:, 1] >= grid.y_min)
        & (pts[:, 1] < grid.y_max)
        & (pts[:, 2] >= grid.z_min)
        & (pts[:, 2] < grid.z_max)
    )
    kept = pts[keep]
    ix = np.floor((kept[:, 0] - grid.x_min) / grid.sx).astype(np.int64)
    iy = np.floor((kept[:, 1] - grid.y_min) / grid.sy).astype(np.int64)
    # guard the x == x_max - eps edge where the ratio rounds up
    np.clip(ix, 0, grid.nx - 1, out=ix)
    np.clip(iy, 0, grid.ny - 1, out=iy)
    return PillarAssignment(
        keep=keep,
        cells=np.stack([ix, iy], axis=1),
        num_discarded=int((~keep).sum()),
    )


class PillarFeatureNet(nn.Module):
    """Shared per-point MLP + per-pillar max pool.

    Each point is augmented with its offsets to the pillar center and to
    the per-pillar point mean (8 input channels total). Max-pool ties go
    to the first point in input order, so one winner receives gradient.
    """

    def __init__(self, hidden: int = 64, out_channels: int = 64, dtype=torch.float32):
        super().__init__()
        self.out_channels = out_channels
        self.mlp = nn.Sequential(
            nn.Linear(8, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, out_channels, dtype=dtype),
            nn.ReLU(),
        )

    def forward(self, points: torch.Tensor, cells: torch.Tensor, grid: PillarGrid):
        """points: (M, 3) kept points; cells: (M, 2) pillar index per point.

        Returns (features (P, C), unique_cells (P, 2)) over occupied pillars.
        """
        if points.shape[0] == 0:
            empty = points.new_zeros((0, self.out_channels))
            return empty, torch.zeros((0, 2), dtype=torch.long)
        key = cells[:, 0] * grid.ny + cells[:, 1]
        uniq, inv = torch.unique(key, sorted=True, return_inverse=True)
        num_pillars = uniq.shape[0]

        counts = torch.zeros(num_pillars, dtype=points.dtype).index_add_(
            0, inv, torch.ones(points.shape[0], dtype=points.dtype)
        )
        sums = torch.zeros((num_pillars, 3), dtype=points.dtype).index_add_(0, inv, points)
        means = sums / counts[:, None]

        cx = grid.x_min + (cells[:, 0].to(points.dtype) + 0.5) * grid.sx
        cy = grid.y_min + (cells[:, 1].to(points.dtype) + 0.5) * grid.sy
        feats_in = torch.cat(
            [
                points,
                (points[:, 0] - cx)[:, None],
                (points[:, 1] - cy)[:, None],
                points - means[inv],
            ],
            dim=1,
        )
        per_point = self.mlp(feats_in)

        # stable sort by pillar keeps input order within each pillar, so
        # torch.max's first-occurrence argmax realizes the tie rule
        order = torch.argsort(inv, stable=True)
        inv_sorted = inv[order]
        ranks = torch.arange(points.shape[0]) - torch.cumsum(
            torch.nn.functional.pad(counts.long(), (1, 0)), dim=0
        )[inv_sorted]
        max_count = int(counts.max().item())
        padded = per_point.new_full((num_pillars, max_count, self.out_channels), float("-inf"))
        padded[inv_sorted, ranks] = per_point[order]
        pooled, _ = padded.max(dim=1)

        unique_cells = torch.stack([uniq // grid.ny, uniq % grid.ny], dim=1)
        return pooled, unique_cells


def scatter_to_grid(pillar_feats: torch.Tensor, cells: torch.Tensor, grid: PillarGrid):
    """Scatter per-pillar features onto a dense (C, nx, ny) map; zeros elsewhere."""
    if cells.shape[0]:
        if (
            cells.min() < 0
            or cells[:, 0].max() >= grid.nx
            or cells[:, 1].max() >= grid.ny
        ):
            raise RuntimeError("pillar index escaped the grid; pillarize must prevent this")
    c = pillar_feats.shape[1] if pillar_feats.ndim == 2 else 0
    canvas = pillar_feats.new_zeros((grid.nx * grid.ny, c))
    if cells.shape[0]:
        canvas[cells[:, 0] * grid.ny + cells[:, 1]] = pillar_feats
    return canvas.reshape(grid.nx, grid.ny, c).permute(2, 0, 1)


def gather_from_grid(dense: torch.Tensor, cells: torch.Tensor):
    """Inverse of scatter for occupied cells: dense (C, nx, ny) -> (P, C)."""
    return dense[:, cells[:, 0], cells[:, 1]].T


@dataclass
class BEVFeatureMap:
    """Dense backbone features plus the grid geometry they live on."""

    tensor: torch.Tensor  # (C, nx/stride, ny/stride)
    grid: PillarGrid
    stride: int = 1

    def __post_init__(self):
        c, h, w = self.tensor.shape
        if h * self.stride != self.grid.nx or w * self.stride != self.grid.ny:
            raise ValueError("feature map shape does not match grid / stride")

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]

    @property
    def cell_size(self):
        return self.grid.sx * self.stride, self.grid.sy * self.stride

    def cell_centers(self) -> np.ndarray:
        return self.grid.cell_centers(self.stride)
