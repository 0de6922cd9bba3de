"""Component and depth ablations with a shared pre-trained checkpoint.

Every variant starts from the same single-frame checkpoint and is fine-tuned
with the same epoch count and schedule, so budgets are equal.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

from ..ducanet import ALIGN_FULL, ALIGN_NO_MOTION, ALIGN_NONE
from .config import RunConfig
from .data import Sample
from .evaluate import EvalReport, evaluate
from .train import StageHistory, finetune, load_model, pretrain

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    key: str
    description: str
    overrides: dict

    def model_config(self, cfg: RunConfig):
        return dataclasses.replace(cfg.model, **self.overrides)


def component_variants(n_layers: int) -> list[Variant]:
    return [
        Variant("a", "single frame (N=1)", {"n_frames": 1}),
        Variant("b", "+ gated aggregation only", {"align_mode": ALIGN_NONE, "n_layers": n_layers}),
        Variant("c", "+ deformable alignment without motion", {"align_mode": ALIGN_NO_MOTION, "n_layers": n_layers}),
        Variant("d", "full", {"align_mode": ALIGN_FULL, "n_layers": n_layers}),
    ]


def layer_variants(layers=(1, 2, 3)) -> list[Variant]:
    return [Variant(f"L{l}", f"full, L={l}", {"align_mode": ALIGN_FULL, "n_layers": l}) for l in layers]


def default_variants(cfg: RunConfig) -> list[Variant]:
    return component_variants(cfg.model.n_layers) + layer_variants()


@dataclass
class AblationRow:
    variant: Variant
    report: EvalReport
    history: StageHistory


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def mean_ap(self, key: str) -> float:
        for r in self.rows:
            if r.variant.key == key:
                return r.report.mean_ap
        raise KeyError(key)

    def to_tsv(self) -> str:
        lines = ["variant\tdescription\tn_frames\tn_layers\talign_mode\tmAP\ttrain_s"]
        for r in self.rows:
            m = r.variant.overrides
            lines.append("\t".join([
                r.variant.key, r.variant.description, str(m.get("n_frames", "")), str(m.get("n_layers", "")),
                str(m.get("align_mode", "")), f"{r.report.mean_ap:.6f}", f"{r.history.seconds:.1f}",
            ]))
        return "\n".join(lines) + "\n"


def run_ablation(cfg: RunConfig, train: list[Sample], evals: list[Sample], out_dir: str | Path,
                 variants: list[Variant] | None = None, threads: int = 1) -> AblationResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = default_variants(cfg) if variants is None else variants
    stage1, _ = pretrain(cfg, train, out_dir)
    done: dict[tuple, AblationRow] = {}
    rows = []
    for v in variants:
        model_cfg = v.model_config(cfg)
        signature = tuple(sorted(dataclasses.asdict(model_cfg).items()))
        if signature in done:
            # identical configuration already trained under another label
            prev = done[signature]
            rows.append(AblationRow(v, prev.report, prev.history))
            continue
        vcfg = dataclasses.replace(cfg, model=model_cfg)
        ckpt, hist = finetune(vcfg, train, stage1, out_dir, name=f"variant_{v.key}.dalc")
        report, _ = evaluate(load_model(vcfg, ckpt), evals, cfg.eval, threads)
        log.info("variant %s (%s): mAP %.4f", v.key, v.description, report.mean_ap)
        row = AblationRow(v, report, hist)
        done[signature] = row
        rows.append(row)
    result = AblationResult(rows)
    (out_dir / "ablation.tsv").write_text(result.to_tsv())
    return result
