"""Command-line entry point: ``dalign <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from ..pointcloud import build_frames, frames_in_target_coords, generate_scene
from .config import ConfigError, RunConfig, load_config, save_config
from .data import Sample, generate_dataset, load_samples

log = logging.getLogger("dalign")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dalign", description="Multi-frame BEV detection with dual-query alignment")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic DALN train/eval sequences to --out")
    _common(p)

    p = sub.add_parser("train", help="two-stage training")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("ablate", help="component and depth ablations")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--variants", default=None, help="comma-separated subset, e.g. a,d,L1")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)

    p = sub.add_parser("bench", help="time forward and training steps")
    _common(p)
    p.add_argument("--repeats", type=int, default=3)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def _samples(cfg: RunConfig, data: Path, split: str) -> list[Sample]:
    limit = cfg.train.n_scenes if split == "train" else cfg.eval.n_scenes
    return load_samples(data, split, cfg.model.n_frames, limit)


def cmd_gen_data(cfg: RunConfig, args) -> int:
    counts = generate_dataset(cfg, args.out)
    print(f"split\tscenes\ntrain\t{counts['train']}\neval\t{counts['eval']}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .plotting import loss_curves
    from .train import train

    result = train(cfg, _samples(cfg, args.data, "train"), args.out)
    save_config(cfg, args.out / "config.json")
    h1, h2 = result["history"]
    loss_curves({"stage 1": h1.epoch_loss, "stage 2": h2.epoch_loss}, args.out / "loss.svg")
    print("stage\tepoch\tloss")
    for h in (h1, h2):
        for e, loss in enumerate(h.epoch_loss):
            print(f"{h.stage}\t{e + 1}\t{loss:.6f}")
    print(f"checkpoint\t{result['model']}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .evaluate import evaluate
    from .plotting import bev_view, pr_curves
    from .train import load_model

    samples = _samples(cfg, args.data, "eval")
    model = load_model(cfg, args.checkpoint)
    report, frames = evaluate(model, samples, cfg.eval, args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json())
    (args.out / "report.tsv").write_text(report.to_tsv())
    # wall time varies run to run, so it lives apart from the deterministic report
    (args.out / "timing.tsv").write_text(f"frames\tseconds\n{report.n_frames}\t{report.runtime_s:.3f}\n")
    if cfg.eval.plots:
        for t in {f"{x:g}" for x in cfg.eval.thresholds}:
            pr_curves(report.curves, args.out / f"pr_{t}m.svg", t)
        g = cfg.grid
        bev_view(samples[0].frames[0], frames[0].truth, frames[0].predictions, args.out / "bev_000.svg",
                 (*g.x_range, *g.y_range))
    sys.stdout.write(report.to_tsv())
    log.info("evaluated %d frames in %.1f s", report.n_frames, report.runtime_s)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .ablate import default_variants, run_ablation
    from .plotting import ablation_bars

    variants = default_variants(cfg)
    if args.variants:
        wanted = args.variants.split(",")
        unknown = set(wanted) - {v.key for v in variants}
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}")
        variants = [v for v in variants if v.key in wanted]
    train = load_samples(args.data, "train", cfg.model.n_frames, cfg.train.n_scenes)
    evals = load_samples(args.data, "eval", cfg.model.n_frames, cfg.eval.n_scenes)
    result = run_ablation(cfg, train, evals, args.out, variants, args.threads)
    ablation_bars([r.variant.key for r in result.rows], [r.report.mean_ap for r in result.rows],
                  args.out / "ablation.svg")
    sys.stdout.write(result.to_tsv())
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    report = run_gradcheck(cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "gradcheck.tsv").write_text(report.to_tsv())
    sys.stdout.write(report.to_tsv())
    if not report.passed:
        print(f"gradient check failed (tolerance {TOLERANCE:g})", file=sys.stderr)
        return 1
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    from .bench import run_bench, to_tsv

    scene_cfg = dataclasses.replace(cfg.scene, n_frames=max(cfg.scene.n_frames, cfg.model.n_frames))
    sweeps, truth = generate_scene(scene_cfg, cfg.seed)
    sample = Sample(frames_in_target_coords(build_frames(sweeps), cfg.model.n_frames), truth.frames[-1])
    rows = run_bench(cfg, sample, args.repeats)
    args.out.mkdir(parents=True, exist_ok=True)
    text = to_tsv(rows)
    (args.out / "bench.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
