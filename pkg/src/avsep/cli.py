"""Command-line entry point.

Subcommands: generate, train-ame, train-amnet, separate, localize, evaluate,
plot. Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
is deterministic given its inputs and seeds.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="avsep",
                     description="audio-visual sound separation laboratory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic scene dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--same-class-pairs", type=_bool, default=False,
                   help="sample scenes in same-timbre pairs and write pairs.csv")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing non-empty directory")

    for name in ("train-ame", "train-amnet"):
        p = sub.add_parser(name, help=f"run {name.replace('-', ' ')} from a config file")
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)

    p = sub.add_parser("separate", help="separate a mixture WAV given source videos")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--videos", required=True,
                   help="comma-separated scene directories (frame folders)")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("full", "appearance"), default="full")

    p = sub.add_parser("localize", help="emit per-frame source heatmaps for a video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="run an evaluation protocol over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("sep2", "sep3", "same-class", "loc"),
                   required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mixtures", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot", help="render figures from a results CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# Command bodies


def _cmd_generate(args) -> int:
    from .scenes import TIMBRE_CLASSES, sample_manifest, write_dataset

    rng = np.random.default_rng(args.seed)
    manifests = []
    pairs = []
    if args.same_class_pairs:
        i = 0
        while len(manifests) < args.scenes:
            timbre = TIMBRE_CLASSES[int(rng.integers(len(TIMBRE_CLASSES)))]
            first = sample_manifest(f"scene_{i:04d}", rng, timbre_class=timbre)
            manifests.append(first)
            i += 1
            if len(manifests) < args.scenes:
                second = sample_manifest(f"scene_{i:04d}", rng, timbre_class=timbre)
                manifests.append(second)
                pairs.append((first.scene_id, second.scene_id))
                i += 1
    else:
        manifests = [sample_manifest(f"scene_{i:04d}", rng) for i in range(args.scenes)]
    write_dataset(manifests, args.out, force=args.force)
    if args.same_class_pairs:
        with open(Path(args.out) / "pairs.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scene_a", "scene_b"])
            writer.writerows(pairs)
    print(f"wrote {len(manifests)} scenes to {args.out}")
    return 0


def _cmd_train_ame(args) -> int:
    from .ame import save_ame_checkpoint
    from .training import parse_config, train_ame_from_config

    config = parse_config(args.config)
    model, history = train_ame_from_config(config)
    save_ame_checkpoint(args.out, model, history, config.echo())
    print(f"saved embedding checkpoint to {args.out}")
    return 0


def _cmd_train_amnet(args) -> int:
    from .training import parse_config, train_amnet

    config = parse_config(args.config)
    train_amnet(config, out_path=args.out)
    print(f"saved separation checkpoint to {args.out}")
    return 0


def _cmd_separate(args) -> int:
    from .audio import read_wav, write_wav
    from .pipeline import load_checkpoint, separate_mixture
    from .plotting import separation_panel
    from .scenes import read_scene

    kind, model, _ = load_checkpoint(args.ckpt)
    if kind != "amnet":
        raise ValueError("separation needs a two-stage separation checkpoint")
    mixture = read_wav(args.mixture)
    videos = [read_scene(video_dir).load_frames()
              for video_dir in args.videos.split(",")]
    estimates, mix_grid = separate_mixture(model, mixture, videos, stage=args.stage)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, est in enumerate(estimates):
        write_wav(out / f"source_{n}.wav", est.waveform, fmt="float32")
        np.save(out / f"mask_{n}.npy", est.mask.values)
    separation_panel(mix_grid, estimates, out / "panels.png")
    print(f"wrote {len(estimates)} separated sources to {out}")
    return 0


def _cmd_localize(args) -> int:
    from .pipeline import load_checkpoint, localize_video
    from .plotting import heatmap_overlays
    from .scenes import read_scene

    _, model, _ = load_checkpoint(args.ckpt)
    record = read_scene(args.video)
    frames = record.load_frames()
    heatmap = localize_video(model, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "heatmap.npy", heatmap)
    boxes = record.load_boxes()
    heatmap_overlays(frames, heatmap, out, boxes=boxes)
    print(f"wrote heatmap tensor and {frames.num_frames} overlays to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_localization, evaluate_separation
    from .metrics import write_localization_csv, write_separation_csv
    from .pipeline import load_checkpoint
    from .scenes import read_dataset

    kind, model, _ = load_checkpoint(args.ckpt)
    records = read_dataset(args.dataset)
    if args.mode == "loc":
        rows, stats = evaluate_localization(model, records)
        write_localization_csv(args.out, rows)
        print(f"localization: ciou@0.5 {stats['ciou_at_half']:.3f} "
              f"auc {stats['auc']:.3f} peak-in-box {stats['peak_in_box_rate']:.3f}")
        return 0
    if kind != "amnet":
        raise ValueError("separation protocols need a two-stage checkpoint")
    rows = evaluate_separation(model, records, mode=args.mode,
                               n_mixtures=args.mixtures, seed=args.seed)
    write_separation_csv(args.out, rows)
    from .evaluation import pooled_mean

    for system in ("copy_paste", "appearance", "amnet", "oracle_ibm"):
        print(f"{system}: mean SDR {pooled_mean(rows, system):.2f} dB")
    print(f"wrote {args.out}")
    return 0


def _cmd_plot(args) -> int:
    from .plotting import plot_results_csv

    written = plot_results_csv(args.csv, args.out)
    print(f"wrote {len(written)} figures to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train-ame": _cmd_train_ame,
    "train-amnet": _cmd_train_amnet,
    "separate": _cmd_separate,
    "localize": _cmd_localize,
    "evaluate": _cmd_evaluate,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # runtime failures map to exit code 2
        print(f"error: {e}", file=sys.stderr)
        return 2


def entrypoint():  # console-script shim
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
