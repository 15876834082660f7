"""Figure emission for reports: score bar charts from result CSVs,
spectrogram/mask panels for separations, and heatmap overlays for
localization. All figures render through the Agg backend with pinned style
and metadata so regeneration is byte-stable on a machine."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.autolayout": True,
}

_PNG_METADATA = {"Software": "avsep"}

SYSTEM_ORDER = ("copy_paste", "appearance", "amnet", "oracle_ibm")
SYSTEM_COLORS = {"copy_paste": "#9e9e9e", "appearance": "#5b8dd9",
                 "amnet": "#2d7f3e", "oracle_ibm": "#c9a227", "ame": "#2d7f3e",
                 "uniform_baseline": "#9e9e9e"}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def read_csv_rows(path) -> list[dict]:
    """Read a result CSV; malformed numeric cells report their row number."""
    with open(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV, nothing to plot")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            parsed = {}
            for key, value in row.items():
                if key in ("scene_id", "source_id", "system"):
                    parsed[key] = value
                else:
                    try:
                        parsed[key] = float(value)
                    except (TypeError, ValueError) as e:
                        raise ValueError(
                            f"{path}: row {lineno}: bad value {value!r} "
                            f"for column {key}") from e
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: empty CSV, nothing to plot")
    return rows


def _is_summary(row) -> bool:
    return row["scene_id"] in ("mean_pooled", "mean_by_mixture", "all")


def plot_separation_csv(csv_path, out_dir) -> list[Path]:
    """Bar charts of pooled SDR/SIR/SAR per system; returns written paths."""
    rows = read_csv_rows(csv_path)
    if "sdr" not in rows[0]:
        raise ValueError(f"{csv_path} does not look like a separation CSV")
    data_rows = [r for r in rows if not _is_summary(r)]
    systems = [s for s in SYSTEM_ORDER if any(r["system"] == s for r in data_rows)]
    systems += sorted({r["system"] for r in data_rows} - set(systems))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(FIG_STYLE):
        for metric in ("sdr", "sir", "sar"):
            fig, ax = plt.subplots(figsize=(4.2, 3.0))
            means = [np.mean([r[metric] for r in data_rows if r["system"] == s])
                     for s in systems]
            ax.bar(range(len(systems)), means,
                   color=[SYSTEM_COLORS.get(s, "#777777") for s in systems])
            ax.set_xticks(range(len(systems)))
            ax.set_xticklabels(systems, rotation=20)
            ax.set_ylabel(f"{metric.upper()} (dB)")
            ax.set_title(f"mean {metric.upper()} by system")
            for i, v in enumerate(means):
                ax.text(i, v, f"{v:.2f}", ha="center",
                        va="bottom" if v >= 0 else "top")
            path = out_dir / f"separation_{metric}.png"
            _save(fig, path)
            written.append(path)
    return written


def plot_localization_csv(csv_path, out_dir) -> list[Path]:
    rows = read_csv_rows(csv_path)
    if "ciou_at_half" not in rows[0]:
        raise ValueError(f"{csv_path} does not look like a localization CSV")
    pooled = [r for r in rows if r["scene_id"] == "all"]
    if not pooled:
        pooled = rows
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = ("ciou_at_half", "auc", "peak_in_box_rate")
    with plt.rc_context(FIG_STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.0))
        width = 0.8 / len(pooled)
        for j, row in enumerate(pooled):
            vals = [row[m] for m in metrics]
            xs = np.arange(len(metrics)) + j * width
            ax.bar(xs, vals, width=width, label=row["system"],
                   color=SYSTEM_COLORS.get(row["system"], "#777777"))
        ax.set_xticks(np.arange(len(metrics)) + 0.4 - width / 2)
        ax.set_xticklabels(metrics, rotation=10)
        ax.set_ylim(0, 1.05)
        ax.legend()
        ax.set_title("localization scores")
        path = out_dir / "localization_scores.png"
        _save(fig, path)
    return [path]


def plot_results_csv(csv_path, out_dir) -> list[Path]:
    """Dispatch on the CSV schema (separation vs localization)."""
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
    if "sdr" in header:
        return plot_separation_csv(csv_path, out_dir)
    if "ciou_at_half" in header:
        return plot_localization_csv(csv_path, out_dir)
    raise ValueError(f"{csv_path}: unrecognized CSV schema {header}")


def separation_panel(mix_grid, estimates, out_path) -> Path:
    """Mixture spectrogram, per-source masks, and masked outputs in one figure."""
    n = len(estimates)
    with plt.rc_context(FIG_STYLE):
        fig, axes = plt.subplots(2, n + 1, figsize=(2.6 * (n + 1), 4.6))
        show = dict(origin="lower", aspect="auto", cmap="magma")
        log_mix = np.log1p(mix_grid.values)
        axes[0, 0].imshow(log_mix, **show)
        axes[0, 0].set_title("mixture (log magnitude)")
        axes[1, 0].axis("off")
        for i, est in enumerate(estimates):
            axes[0, i + 1].imshow(est.mask.values, origin="lower", aspect="auto",
                                  cmap="gray", vmin=0, vmax=1)
            axes[0, i + 1].set_title(f"mask {i}")
            axes[1, i + 1].imshow(np.log1p(est.grid.values), **show)
            axes[1, i + 1].set_title(f"separated {i}")
        for ax in axes.flat:
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, out_path)
    return Path(out_path)


def heatmap_overlays(frames, heatmap, out_dir, boxes=None) -> list[Path]:
    """One PNG per frame: video frame, heat overlay, optional ground-truth box."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(FIG_STYLE):
        for f in range(frames.num_frames):
            fig, ax = plt.subplots(figsize=(3.0, 3.0))
            ax.imshow(frames.values[:, f].transpose(1, 2, 0))
            ax.imshow(heatmap[f], cmap="inferno", alpha=0.45, vmin=0, vmax=1)
            if boxes is not None:
                x0, y0, x1, y1 = boxes[f]
                ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0,
                                           fill=False, edgecolor="lime", linewidth=1.5))
            ax.set_xticks([])
            ax.set_yticks([])
            path = out_dir / f"overlay_{f:05d}.png"
            _save(fig, path)
            written.append(path)
    return written
