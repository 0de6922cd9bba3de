"""Pillar BEV feature extraction producing an S-scale feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .pointcloud import PointFrame
from .tensor import Tensor

N_POINT_FEATURES = 10


@dataclass
class GridConfig:
    x_range: tuple[float, float] = (-25.6, 25.6)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-3.0, 5.0)
    cell: float = 0.4
    max_points_per_pillar: int = 32
    max_pillars: int = 16000

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell))

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell))

    def validate(self, n_scales: int = 1) -> None:
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if hi <= lo:
                raise ValueError("degenerate grid range")
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError("grid range must be divisible by the cell size")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid has zero cells")
        div = 2**n_scales
        if self.width % div or self.height % div:
            raise ValueError(f"grid {self.height}x{self.width} not divisible by 2^S = {div}")
        if self.max_points_per_pillar < 1 or self.max_pillars < 1:
            raise ValueError("pillar limits must be positive")


@dataclass
class Pillars:
    """Points grouped per non-empty cell.

    ``points`` is sorted by pillar; ``starts[k]`` is the first row of pillar
    ``k`` and ``cells[k]`` its flat cell index ``row * width + col``.
    """

    points: np.ndarray  # (P, 5)
    point_pillar: np.ndarray  # (P,)
    starts: np.ndarray
    cells: np.ndarray
    grid: GridConfig

    @property
    def n_pillars(self) -> int:
        return len(self.cells)


def cell_of(xy: np.ndarray, grid: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """(column, row) of each point; column follows x, row follows y."""
    col = np.floor((xy[:, 0] - grid.x_range[0]) / grid.cell).astype(np.int64)
    row = np.floor((xy[:, 1] - grid.y_range[0]) / grid.cell).astype(np.int64)
    return col, row


def pillarize(frame: PointFrame | np.ndarray, grid: GridConfig) -> Pillars:
    pts = frame.points if isinstance(frame, PointFrame) else np.asarray(frame, dtype=np.float32)
    grid.validate()
    col, row = cell_of(pts, grid)
    keep = (col >= 0) & (col < grid.width) & (row >= 0) & (row < grid.height)
    keep &= (pts[:, 2] >= grid.z_range[0]) & (pts[:, 2] < grid.z_range[1])
    pts, col, row = pts[keep], col[keep], row[keep]
    cell = row * grid.width + col

    # pillar order = order of first appearance in the input
    uniq, first = np.unique(cell, return_index=True)
    by_first = np.argsort(first, kind="stable")
    uniq = uniq[by_first][: grid.max_pillars]
    rank_of_cell = np.full(grid.width * grid.height, -1, dtype=np.int64)
    rank_of_cell[uniq] = np.arange(len(uniq))
    pillar = rank_of_cell[cell]
    sel = pillar >= 0
    pts, pillar = pts[sel], pillar[sel]

    order = np.argsort(pillar, kind="stable")
    pts, pillar = pts[order], pillar[order]
    counts = np.bincount(pillar, minlength=len(uniq))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    rank_in = np.arange(len(pillar)) - starts[pillar]
    sel = rank_in < grid.max_points_per_pillar
    pts, pillar = pts[sel], pillar[sel]
    counts = np.minimum(counts, grid.max_points_per_pillar)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return Pillars(pts, pillar, starts, uniq, grid)


def point_features(p: Pillars) -> np.ndarray:
    """Per-point (x, y, z, r, dt, offsets to pillar centroid, offsets to cell center)."""
    pts = p.points.astype(np.float64)
    n = max(p.n_pillars, 1)
    counts = np.bincount(p.point_pillar, minlength=n).astype(np.float64)
    centroid = np.stack(
        [np.bincount(p.point_pillar, weights=pts[:, d], minlength=n) for d in range(3)], axis=1
    ) / np.maximum(counts, 1)[:, None]
    cells = p.cells[p.point_pillar]
    col = cells % p.grid.width
    row = cells // p.grid.width
    cx = p.grid.x_range[0] + (col + 0.5) * p.grid.cell
    cy = p.grid.y_range[0] + (row + 0.5) * p.grid.cell
    feats = np.column_stack([
        pts[:, :5],
        pts[:, :3] - centroid[p.point_pillar],
        pts[:, 0] - cx,
        pts[:, 1] - cy,
    ])
    return feats


class PillarEncoder:
    """Shared per-point affine + relu, max-pool per pillar, scatter to the grid."""

    def __init__(self, store: ParameterStore, prefix: str, channels: int):
        self.channels = channels
        self.weight = store.create(f"{prefix}.weight", (channels, N_POINT_FEATURES))
        self.bias = store.create(f"{prefix}.bias", (channels,), fan_in=N_POINT_FEATURES)

    def __call__(self, pillars: Pillars) -> Tensor:
        grid = pillars.grid
        n_cells = grid.height * grid.width
        dtype = self.weight.dtype
        if pillars.n_pillars == 0:
            return Tensor(np.zeros((self.channels, grid.height, grid.width), dtype=dtype))
        feats = Tensor(point_features(pillars).astype(dtype))
        h = T.relu(T.linear(feats, self.weight, self.bias))
        pooled = T.segment_max(h, pillars.starts)
        flat = T.scatter_rows(pooled, pillars.cells, n_cells)  # (H*W, D)
        return T.reshape(T.transpose(flat, (1, 0)), (self.channels, grid.height, grid.width))


class ConvNormAct:
    def __init__(self, store: ParameterStore, prefix: str, c_in: int, c_out: int, stride: int = 1):
        self.stride = stride
        self.kernel = store.create(f"{prefix}.kernel", (c_out, c_in, 3, 3))
        self.bias = store.create(f"{prefix}.bias", (c_out,), fan_in=c_in * 9)
        self.gain = store.create(f"{prefix}.gain", (c_out, 1, 1), init="ones")
        self.shift = store.create(f"{prefix}.shift", (c_out, 1, 1), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.kernel, self.bias, stride=self.stride)
        # norm over channels at each cell
        return T.relu(T.layer_norm(y, self.gain, self.shift, axis=0))


class MultiScaleBackbone:
    """S stages of (stride-2 conv block, conv block), one pyramid level per stage."""

    def __init__(self, store: ParameterStore, prefix: str, channels: int, n_scales: int):
        self.stages = [
            (
                ConvNormAct(store, f"{prefix}.stage{s}.down", channels, channels, stride=2),
                ConvNormAct(store, f"{prefix}.stage{s}.conv", channels, channels),
            )
            for s in range(n_scales)
        ]

    def __call__(self, bev: Tensor) -> list[Tensor]:
        _, h, w = bev.shape
        div = 2 ** len(self.stages)
        if h % div or w % div:
            raise ValueError(f"BEV map {h}x{w} not divisible by {div}")
        out = []
        x = bev
        for down, conv in self.stages:
            x = conv(down(x))
            out.append(x)
        return out


class BEVBackbone:
    def __init__(self, store: ParameterStore, grid: GridConfig, channels: int = 64, n_scales: int = 3,
                 prefix: str = "backbone"):
        grid.validate(n_scales)
        self.grid = grid
        self.channels = channels
        self.n_scales = n_scales
        self.encoder = PillarEncoder(store, f"{prefix}.pfn", channels)
        self.pyramid = MultiScaleBackbone(store, prefix, channels, n_scales)

    def __call__(self, frame: PointFrame | np.ndarray) -> list[Tensor]:
        return self.pyramid(self.encoder(pillarize(frame, self.grid)))
