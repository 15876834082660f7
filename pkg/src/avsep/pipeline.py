"""Checkpoint loading and end-to-end inference: mixture in, per-source
waveforms, masks, and heatmaps out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import audio
from .ame import AmeModel, load_ame_checkpoint, localization_heatmap
from .audio import BinaryMask, MagGrid, Waveform
from .scenes import FrameSequence
from .training import AmnetModel, load_amnet_checkpoint


def load_checkpoint(path):
    """Load either checkpoint kind; returns (kind, model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    kind = payload.get("kind")
    if kind == "ame":
        model, payload = load_ame_checkpoint(path)
        return "ame", model, payload
    if kind == "amnet":
        model, payload = load_amnet_checkpoint(path)
        return "amnet", model, payload
    raise ValueError(f"{path} is not a recognized checkpoint")


@dataclass
class SourceEstimate:
    waveform: Waveform
    mask: BinaryMask
    probabilities: np.ndarray  # sigmoid map on the warped grid
    grid: MagGrid              # masked magnitude grid


def separate_mixture(model: AmnetModel, mixture: Waveform,
                     videos: list[FrameSequence], stage: str = "full"):
    """Separate ``mixture`` into one estimate per provided video.

    ``stage`` selects the refined output ("full") or the first-stage
    appearance output only ("appearance"). Returns (estimates, mixture grid).
    """
    if stage not in ("full", "appearance"):
        raise ValueError(f"unknown stage {stage!r}")
    if len(videos) < 2:
        raise ValueError("need at least 2 source videos")
    signal = model.signal
    model.eval()
    spec = audio.stft(mixture, window_size=signal.window_size, hop=signal.hop)
    grid = audio.warp_magnitude(spec, bins=signal.grid_bins, frames=signal.grid_frames)

    center = videos[0].num_frames // 2
    keyframes = torch.from_numpy(np.stack(
        [v.values[:, center] for v in videos])).unsqueeze(0)
    video_batch = torch.from_numpy(np.stack([v.values for v in videos]))
    with torch.no_grad():
        tokens = model.motion_tokens(video_batch).unsqueeze(0)
        mix_grids = torch.from_numpy(grid.values.astype(np.float32)).reshape(
            1, 1, signal.grid_bins, signal.grid_frames)
        out = model.forward_pair(keyframes, mix_grids, tokens)
    key = "appearance" if stage == "appearance" else "motion"
    probs = out[f"{key}_probs"][0, :, 0].cpu().numpy().astype(np.float64)
    masks = out[f"{key}_masks"][0, :, 0].cpu().numpy().astype(np.float64)

    estimates = []
    for n in range(len(videos)):
        mask = BinaryMask.like(grid, masks[n])
        full = audio.unwarp_mask(mask, spec)
        est = audio.istft(audio.apply_mask(full, spec), len(mixture))
        estimates.append(SourceEstimate(
            waveform=est, mask=mask, probabilities=probs[n],
            grid=audio.apply_mask(mask, grid)))
    return estimates, grid


def localize_video(model: AmeModel, frames: FrameSequence) -> np.ndarray:
    """Per-frame heatmap (T x H x W in [0, 1]) from the motion activation."""
    return localization_heatmap(model, frames)
