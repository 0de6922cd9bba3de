"""Center-heatmap detection head, training targets, loss and box decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import GridConfig
from .params import ParameterStore
from .pointcloud import BoxSet
from .tensor import Tensor

N_REG = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
L1_WEIGHT = 0.25
HEATMAP_PRIOR = -2.19  # sigmoid(-2.19) ~ 0.1


@dataclass
class DetectionBox:
    x: float
    y: float
    z: float
    length: float
    width: float
    height: float
    yaw: float
    class_id: int
    score: float


@dataclass(frozen=True)
class OutputGrid:
    x_min: float
    y_min: float
    cell: float
    height: int
    width: int

    @staticmethod
    def from_grid(grid: GridConfig, stride: int = 2) -> "OutputGrid":
        return OutputGrid(grid.x_range[0], grid.y_range[0], grid.cell * stride, grid.height // stride,
                          grid.width // stride)


@dataclass
class HeadOutput:
    heatmap_logits: Tensor  # [K, H, W]
    regression: Tensor  # [8, H, W]

    @property
    def heatmap(self) -> np.ndarray:
        return T._sigmoid(self.heatmap_logits.data)


@dataclass
class Targets:
    heatmap: np.ndarray  # [K, H, W]
    rows: np.ndarray
    cols: np.ndarray
    classes: np.ndarray
    regression: np.ndarray  # [n, 8]


class DetectionHead:
    def __init__(self, store: ParameterStore, in_channels: int, n_classes: int, hidden: int = 64,
                 prefix: str = "head"):
        self.n_classes = n_classes
        self.trunk = store.create(f"{prefix}.trunk.kernel", (hidden, in_channels, 3, 3))
        self.trunk_b = store.create(f"{prefix}.trunk.bias", (hidden,), fan_in=in_channels * 9)
        self.heat = store.create(f"{prefix}.heat.kernel", (n_classes, hidden, 3, 3))
        self.heat_b = store.create(f"{prefix}.heat.bias", (n_classes,), init="constant", value=HEATMAP_PRIOR)
        self.reg = store.create(f"{prefix}.reg.kernel", (N_REG, hidden, 3, 3))
        self.reg_b = store.create(f"{prefix}.reg.bias", (N_REG,), fan_in=hidden * 9)

    def __call__(self, fused: Tensor) -> HeadOutput:
        x = T.relu(T.conv2d(fused, self.trunk, self.trunk_b))
        return HeadOutput(T.conv2d(x, self.heat, self.heat_b), T.conv2d(x, self.reg, self.reg_b))


def gaussian_radius(length: float, width: float, min_overlap: float = 0.1) -> float:
    """Largest center shift keeping a box's overlap with itself above ``min_overlap``."""
    a1, b1 = 1.0, length + width
    c1 = width * length * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 * b1 - 4 * a1 * c1)) / 2
    a2, b2 = 4.0, 2 * (length + width)
    c2 = (1 - min_overlap) * width * length
    r2 = (b2 + math.sqrt(b2 * b2 - 4 * a2 * c2)) / 2
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (length + width)
    c3 = (min_overlap - 1) * width * length
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, row: int, col: int, radius: int) -> None:
    sigma = (2 * radius + 1) / 6.0
    h, w = heatmap.shape
    r0, r1 = max(0, row - radius), min(h, row + radius + 1)
    c0, c1 = max(0, col - radius), min(w, col + radius + 1)
    yy, xx = np.meshgrid(np.arange(r0, r1) - row, np.arange(c0, c1) - col, indexing="ij")
    g = np.exp(-(xx * xx + yy * yy) / (2 * sigma * sigma))
    np.maximum(heatmap[r0:r1, c0:c1], g, out=heatmap[r0:r1, c0:c1])


def encode_targets(boxes: BoxSet, grid: OutputGrid, n_classes: int) -> Targets:
    heat = np.zeros((n_classes, grid.height, grid.width))
    rows, cols, classes, regs = [], [], [], []
    for p, cls in zip(boxes.params.astype(np.float64), boxes.class_id):
        cx = (p[0] - grid.x_min) / grid.cell
        cy = (p[1] - grid.y_min) / grid.cell
        col, row = int(math.floor(cx)), int(math.floor(cy))
        if not (0 <= col < grid.width and 0 <= row < grid.height) or cls >= n_classes:
            continue
        radius = max(1, int(gaussian_radius(p[3] / grid.cell, p[4] / grid.cell)))
        draw_gaussian(heat[cls], row, col, radius)
        heat[cls, row, col] = 1.0
        rows.append(row)
        cols.append(col)
        classes.append(int(cls))
        regs.append([cx - col, cy - row, p[2], math.log(p[3]), math.log(p[4]), math.log(p[5]),
                     math.sin(p[6]), math.cos(p[6])])
    return Targets(heat, np.asarray(rows, np.int64), np.asarray(cols, np.int64), np.asarray(classes, np.int64),
                   np.asarray(regs, np.float64).reshape(-1, N_REG))


def compute_loss(out: HeadOutput, targets: Targets) -> tuple[Tensor, dict[str, float]]:
    """Penalty-reduced focal loss on the heatmap plus weighted L1 at object centers.

    Both terms are normalized by the number of objects (at least one).
    """
    x = out.heatmap_logits
    dtype = x.dtype
    pos = np.zeros(x.shape, dtype=dtype)
    pos[targets.classes, targets.rows, targets.cols] = 1.0
    n_pos = max(1, len(targets.rows))
    neg_w = ((1.0 - targets.heatmap) ** 4 * (1.0 - pos)).astype(dtype)

    p = T.sigmoid(x)
    one_minus_p = T.sub(1.0, p)
    pos_term = T.sum(T.mul(T.mul(T.mul(one_minus_p, one_minus_p), T.log_sigmoid(x)), Tensor(pos)))
    neg_term = T.sum(T.mul(T.mul(T.mul(p, p), T.log_sigmoid(T.neg(x))), Tensor(neg_w)))
    focal = T.mul(T.add(pos_term, neg_term), -1.0 / n_pos)

    if len(targets.rows):
        pred = T.getitem(out.regression, (slice(None), targets.rows, targets.cols))  # [8, n]
        l1 = T.mul(T.sum(T.abs(T.sub(pred, Tensor(targets.regression.T.astype(dtype))))), 1.0 / n_pos)
    else:
        l1 = Tensor(np.zeros((), dtype=dtype))
    total = T.add(focal, T.mul(l1, L1_WEIGHT))
    return total, {"focal": float(focal.data), "l1": float(l1.data), "total": float(total.data)}


def _wrap(yaw: float) -> float:
    return math.pi if yaw <= -math.pi else yaw


def find_peaks(heat: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3 local maxima; equal neighbors defer to the lower flat index."""
    k, h, w = heat.shape
    padded = np.full((k, h + 2, w + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = heat
    peak = np.ones(heat.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[:, 1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            later = dr > 0 or (dr == 0 and dc > 0)  # neighbor has a larger flat index
            peak &= (heat > nb) | ((heat == nb) & later)
    return peak


def decode(out: HeadOutput, grid: OutputGrid, score_threshold: float = 0.1, max_boxes: int = 100) -> list[DetectionBox]:
    heat = out.heatmap
    reg = out.regression.data.astype(np.float64)
    mask = find_peaks(heat) & (heat > score_threshold)
    cls, rows, cols = np.nonzero(mask)
    scores = heat[cls, rows, cols]
    order = np.lexsort((cls, cols, rows, -scores))[:max_boxes]
    boxes = []
    for i in order:
        c, r, q = int(cls[i]), int(rows[i]), int(cols[i])
        v = reg[:, r, q]
        boxes.append(DetectionBox(
            x=(q + v[0]) * grid.cell + grid.x_min,
            y=(r + v[1]) * grid.cell + grid.y_min,
            z=float(v[2]),
            length=float(np.exp(np.clip(v[3], -10, 10))),
            width=float(np.exp(np.clip(v[4], -10, 10))),
            height=float(np.exp(np.clip(v[5], -10, 10))),
            yaw=_wrap(math.atan2(v[6], v[7])),
            class_id=c,
            score=float(scores[i]),
        ))
    return boxes


def targets_as_output(targets: Targets, n_reg_fill: float = 0.0) -> HeadOutput:
    """Head output that reproduces ``targets`` exactly (for round-trip checks)."""
    heat = np.clip(targets.heatmap, 1e-12, 1 - 1e-12)
    logits = np.log(heat) - np.log1p(-heat)
    reg = np.full((N_REG, *targets.heatmap.shape[1:]), n_reg_fill)
    reg[:, targets.rows, targets.cols] = targets.regression.T
    return HeadOutput(Tensor(logits, dtype=np.float64), Tensor(reg, dtype=np.float64))
