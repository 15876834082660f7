"""Separation and localization quality metrics.

Separation scores follow the classical projection decomposition: the estimate
is split into a target part (projection onto the target reference), an
interference part (projection onto the span of all references, minus the
target part), and an artifact remainder. SDR/SIR/SAR are energy ratios of
those parts in dB, clamped to +-100 dB so reports never contain infinities.

Localization scores compare thresholded heatmaps against ground-truth boxes
via the consensus intersection-over-union and its threshold-sweep area.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .audio import (
    Waveform,
    apply_mask,
    ideal_binary_mask,
    istft,
    stft,
    unwarp_mask,
    warp_magnitude,
)

DB_CLAMP = 100.0


@dataclass(frozen=True)
class BssScores:
    sdr: float
    sir: float
    sar: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.sdr, self.sir, self.sar)


@dataclass(frozen=True)
class LocScores:
    ciou_at_half: float
    auc: float


def _db_ratio(num: float, den: float) -> float:
    if num <= 0.0:
        return -DB_CLAMP
    if den <= 0.0:
        return DB_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def bss_eval(estimate: Waveform, references: Sequence[Waveform], target_index: int) -> BssScores:
    """Score ``estimate`` against ``references`` with the projection decomposition.

    ``s_target`` is the least-squares projection of the estimate onto the
    target reference, ``e_interf`` the extra component captured by the span
    of all references, and ``e_artif`` whatever remains. References must be
    equal-length, equal-rate, non-silent and linearly independent.
    """
    if not 0 <= target_index < len(references):
        raise ValueError("target_index out of range")
    n = len(estimate)
    rate = estimate.sample_rate
    for r in references:
        if len(r) != n or r.sample_rate != rate:
            raise ValueError("references must match the estimate's length and rate")
    ref = np.stack([r.samples for r in references])
    energies = np.sum(ref**2, axis=1)
    if np.any(energies == 0.0):
        raise ValueError("zero-energy reference")
    est = estimate.samples
    if np.sum(est**2) == 0.0:
        return BssScores(-DB_CLAMP, -DB_CLAMP, -DB_CLAMP)

    target = references[target_index].samples
    s_target = (np.dot(est, target) / np.dot(target, target)) * target

    # projection onto span(references) through an orthonormal basis
    q, rmat = np.linalg.qr(ref.T)
    diag = np.abs(np.diag(rmat))
    if np.any(diag < 1e-12 * diag.max()):
        raise ValueError("references are linearly dependent")
    p_all = q @ (q.T @ est)

    e_interf = p_all - s_target
    e_artif = est - p_all

    sdr = _db_ratio(np.sum(s_target**2), np.sum((e_interf + e_artif) ** 2))
    sir = _db_ratio(np.sum(s_target**2), np.sum(e_interf**2))
    sar = _db_ratio(np.sum((s_target + e_interf) ** 2), np.sum(e_artif**2))
    return BssScores(sdr, sir, sar)


def ciou(heatmap: np.ndarray, gt_box: Sequence[float], threshold: float) -> float:
    """Consensus IoU: |P∩G| / (|G| + |P∖G|) for P = {heatmap >= threshold}.

    ``gt_box`` is (x0, y0, x1, y1) in pixels, half-open, and must describe a
    non-empty region inside the frame.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    h, w = hm.shape
    x0, y0, x1, y1 = (float(v) for v in gt_box)
    ix0, iy0 = int(np.floor(x0)), int(np.floor(y0))
    ix1, iy1 = int(np.ceil(x1)), int(np.ceil(y1))
    if not (0 <= ix0 < ix1 <= w and 0 <= iy0 < iy1 <= h):
        raise ValueError(f"box {gt_box} empty or outside a {w}x{h} frame")
    gt = np.zeros((h, w), dtype=bool)
    gt[iy0:iy1, ix0:ix1] = True
    pred = hm >= threshold
    inter = np.sum(pred & gt)
    outside = np.sum(pred & ~gt)
    return float(inter / (gt.sum() + outside))


#: success-rate sweep grid used for the localization AUC
CIOU_SWEEP = np.round(np.arange(0.0, 1.0001, 0.05), 2)


def localization_scores(heatmaps: Sequence[np.ndarray], gt_boxes: Sequence[Sequence[float]],
                        threshold: float = 0.5) -> LocScores:
    """Frame-set localization metrics.

    Each heatmap is min-max normalized (degenerate frames become all-zero),
    binarized at ``threshold``, and scored with :func:`ciou`. ``ciou_at_half``
    is the fraction of frames at or above cIoU 0.5; ``auc`` integrates the
    success-rate curve over the 0..1 sweep in steps of 0.05.
    """
    if len(heatmaps) == 0:
        raise ValueError("empty evaluation set")
    if len(heatmaps) != len(gt_boxes):
        raise ValueError("one box per heatmap required")
    per_frame = []
    for hm, box in zip(heatmaps, gt_boxes):
        hm = np.asarray(hm, dtype=np.float64)
        lo, hi = hm.min(), hm.max()
        norm = (hm - lo) / (hi - lo) if hi > lo else np.zeros_like(hm)
        per_frame.append(ciou(norm, box, threshold))
    per_frame = np.asarray(per_frame)
    success = np.array([(per_frame >= t).mean() for t in CIOU_SWEEP])
    auc = float(np.trapezoid(success, CIOU_SWEEP))
    return LocScores(ciou_at_half=float((per_frame >= 0.5).mean()), auc=auc)


def success_curve(heatmaps: Sequence[np.ndarray], gt_boxes: Sequence[Sequence[float]],
                  threshold: float = 0.5) -> np.ndarray:
    """Success rate per sweep threshold (companion to :func:`localization_scores`)."""
    per_frame = []
    for hm, box in zip(heatmaps, gt_boxes):
        hm = np.asarray(hm, dtype=np.float64)
        lo, hi = hm.min(), hm.max()
        norm = (hm - lo) / (hi - lo) if hi > lo else np.zeros_like(hm)
        per_frame.append(ciou(norm, box, threshold))
    per_frame = np.asarray(per_frame)
    return np.array([(per_frame >= t).mean() for t in CIOU_SWEEP])


def oracle_ibm_separation(mixture: Waveform, components: Sequence[Waveform],
                          window_size: int, hop: int,
                          grid_bins: int, grid_frames: int) -> list[BssScores]:
    """Upper-bound reference: separate with ideal dominance masks, then score.

    Uses the exact same warp -> mask -> unwarp -> mixture-phase -> inverse
    STFT pipeline as the learned models, so learned masks can approach but
    not systematically beat it.
    """
    mix_spec = stft(mixture, window_size=window_size, hop=hop)
    grids = [warp_magnitude(stft(c, window_size=window_size, hop=hop),
                            bins=grid_bins, frames=grid_frames)
             for c in components]
    scores = []
    for n in range(len(components)):
        mask = ideal_binary_mask(grids, n)
        full = unwarp_mask(mask, mix_spec)
        est = istft(apply_mask(full, mix_spec), len(mixture))
        scores.append(bss_eval(est, components, n))
    return scores


# ---------------------------------------------------------------------------
# CSV emission


SEPARATION_FIELDS = ("scene_id", "source_id", "sdr", "sir", "sar", "system")
LOCALIZATION_FIELDS = ("scene_id", "system", "ciou_at_half", "auc", "peak_in_box_rate")


def write_separation_csv(path, rows: Sequence[dict]) -> None:
    """Write per-source rows plus pooled-mean and per-mixture-mean summaries."""
    if not rows:
        raise ValueError("no rows to write")
    systems = sorted({r["system"] for r in rows})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SEPARATION_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "sdr": f"{r['sdr']:.6f}", "sir": f"{r['sir']:.6f}",
                             "sar": f"{r['sar']:.6f}"})
        for system in systems:
            sys_rows = [r for r in rows if r["system"] == system]
            pooled = {k: float(np.mean([r[k] for r in sys_rows])) for k in ("sdr", "sir", "sar")}
            writer.writerow({"scene_id": "mean_pooled", "source_id": "all",
                             "system": system,
                             **{k: f"{v:.6f}" for k, v in pooled.items()}})
            by_scene = {}
            for r in sys_rows:
                by_scene.setdefault(r["scene_id"], []).append(r)
            per_mix = {k: float(np.mean([np.mean([r[k] for r in g]) for g in by_scene.values()]))
                       for k in ("sdr", "sir", "sar")}
            writer.writerow({"scene_id": "mean_by_mixture", "source_id": "all",
                             "system": system,
                             **{k: f"{v:.6f}" for k, v in per_mix.items()}})


def write_localization_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOCALIZATION_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({**r,
                             "ciou_at_half": f"{r['ciou_at_half']:.6f}",
                             "auc": f"{r['auc']:.6f}",
                             "peak_in_box_rate": f"{r['peak_in_box_rate']:.6f}"})
