"""BEV center-distance average precision.

Per class and distance threshold: predictions from all frames are sorted by
descending score (ties keep frame order, then decode order), each is matched
greedily to the nearest unmatched ground truth of the same class in its frame
within the threshold, and AP is the mean interpolated precision at 41 evenly
spaced recall levels. mAP averages over classes that have ground truth and
over all thresholds.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..head import DetectionBox, decode
from ..pointcloud import CLASS_NAMES, BoxSet
from ..tensor import no_grad
from .config import EvalConfig

RECALL_LEVELS = np.linspace(0.0, 1.0, 41)


@dataclass
class FrameDetections:
    predictions: list[DetectionBox]
    truth: BoxSet


def match_class(frames: list[FrameDetections], class_id: int, threshold: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching; returns (scores, tp flags) in ranked order and the ground-truth count."""
    ranked = []
    gts = []
    for f_i, fr in enumerate(frames):
        sel = fr.truth.class_id == class_id
        gts.append(fr.truth.params[sel, :2].astype(np.float64))
        for p_i, p in enumerate(fr.predictions):
            if p.class_id == class_id:
                ranked.append((-p.score, f_i, p_i, p))
    ranked.sort(key=lambda r: r[:3])
    n_gt = int(sum(len(g) for g in gts))
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(ranked), dtype=bool)
    for k, (_, f_i, _, p) in enumerate(ranked):
        g = gts[f_i]
        if not len(g):
            continue
        dist = np.hypot(g[:, 0] - p.x, g[:, 1] - p.y)
        dist[taken[f_i]] = np.inf
        j = int(np.argmin(dist))
        if dist[j] < threshold:
            taken[f_i][j] = True
            tp[k] = True
    scores = np.array([-r[0] for r in ranked])
    return scores, tp, n_gt


def precision_recall(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(tp) + 1)
    recall = tp_cum / max(n_gt, 1)
    return precision, recall


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    precision, recall = precision_recall(tp, n_gt)
    total = 0.0
    for r in RECALL_LEVELS:
        above = precision[recall >= r]
        total += above.max() if len(above) else 0.0
    return float(total / len(RECALL_LEVELS))


@dataclass
class EvalReport:
    ap: dict[str, dict[str, float]]  # class name -> threshold string -> AP
    mean_ap: float
    n_gt: dict[str, int]
    n_pred: dict[str, int]
    n_frames: int
    runtime_s: float = 0.0
    curves: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        """Deterministic content (runtime is kept out so repeated runs compare equal)."""
        return {"mAP": self.mean_ap, "AP": self.ap, "n_gt": self.n_gt, "n_pred": self.n_pred,
                "n_frames": self.n_frames}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_tsv(self) -> str:
        thresholds = sorted({t for v in self.ap.values() for t in v}, key=float)
        lines = ["\t".join(["class", *[f"AP@{t}m" for t in thresholds], "n_gt", "n_pred"])]
        for name, row in self.ap.items():
            lines.append("\t".join([name, *[f"{row[t]:.6f}" for t in thresholds],
                                    str(self.n_gt[name]), str(self.n_pred[name])]))
        lines.append("\t".join(["mAP", f"{self.mean_ap:.6f}"]))
        return "\n".join(lines) + "\n"


def compute_metrics(frames: list[FrameDetections], thresholds, class_names=CLASS_NAMES) -> EvalReport:
    ap: dict[str, dict[str, float]] = {}
    n_gt: dict[str, int] = {}
    n_pred: dict[str, int] = {}
    curves: dict = {}
    values = []
    for c, name in enumerate(class_names):
        row = {}
        for t in thresholds:
            scores, tp, count = match_class(frames, c, t)
            row[f"{t:g}"] = interpolated_ap(tp, count)
            precision, recall = precision_recall(tp, count)
            curves[(name, f"{t:g}")] = (recall, precision)
            if count:
                values.append(row[f"{t:g}"])
        n_gt[name] = count
        n_pred[name] = int(len(scores))
        ap[name] = row
    mean_ap = float(np.mean(values)) if values else 0.0
    return EvalReport(ap, mean_ap, n_gt, n_pred, len(frames), curves=curves)


def in_range(boxes: BoxSet, x_range, y_range) -> BoxSet:
    p = boxes.params
    sel = (p[:, 0] >= x_range[0]) & (p[:, 0] < x_range[1]) & (p[:, 1] >= y_range[0]) & (p[:, 1] < y_range[1])
    return BoxSet(p[sel], boxes.class_id[sel], boxes.instance_id[sel])


def predict(model, samples, cfg: EvalConfig, threads: int = 1) -> list[FrameDetections]:
    """Run the model on every sample; thread count never changes results."""

    def run(sample):
        with no_grad():
            out = model(sample.frames, training=False)
        preds = decode(out, model.output_grid, cfg.score_threshold, cfg.max_boxes)
        return FrameDetections(preds, in_range(sample.boxes, model.grid.x_range, model.grid.y_range))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, samples))
    return [run(s) for s in samples]


def evaluate(model, samples, cfg: EvalConfig, threads: int = 1) -> tuple[EvalReport, list[FrameDetections]]:
    start = time.perf_counter()
    frames = predict(model, samples, cfg, threads)
    report = compute_metrics(frames, cfg.thresholds)
    report.runtime_s = time.perf_counter() - start
    return report, frames
