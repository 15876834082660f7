"""Audio-motion embedding: motion and sound encoders trained so that
temporally aligned video/audio pairs sit close in a shared length-T' space
and shifted pairs sit far, via a margin loss. The single-channel motion
activation doubles as a sound-source localization map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import Waveform
from .config import SignalConfig
from .scenes import FrameSequence

DEFAULT_MARGIN = 2.0


def _width(base: int, scale: float) -> int:
    return max(8, int(round(base * scale)))


class BasicBlock3d(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        stride3 = stride if isinstance(stride, tuple) else (stride,) * 3
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride3, padding=1,
                               padding_mode="circular", bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, stride=1, padding=1,
                               padding_mode="circular", bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        if in_ch != out_ch or any(s != 1 for s in stride3):
            self.down = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride3, bias=False),
                nn.BatchNorm3d(out_ch))
        else:
            self.down = None

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.down is not None:
            x = self.down(x)
        return F.relu(x + y)


class MotionEncoder(nn.Module):
    """3-D residual encoder, stride 4 in time and 16 in space.

    Produces a feature volume (C x T' x H' x W'), a single-channel
    activation map over the same lattice, and the per-step embedding given
    by the spatial mean of that map.
    """

    def __init__(self, width_scale: float = 0.25):
        super().__init__()
        w = [_width(c, width_scale) for c in (64, 128, 256, 512)]
        self.out_channels = w[3]
        self.stem = nn.Sequential(
            nn.Conv3d(3, w[0], (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3),
                      padding_mode="circular", bias=False),
            nn.BatchNorm3d(w[0]),
            nn.ReLU(inplace=True))
        self.layer1 = nn.Sequential(BasicBlock3d(w[0], w[0]), BasicBlock3d(w[0], w[0]))
        self.layer2 = nn.Sequential(BasicBlock3d(w[0], w[1], 2), BasicBlock3d(w[1], w[1]))
        self.layer3 = nn.Sequential(BasicBlock3d(w[1], w[2], 2), BasicBlock3d(w[2], w[2]))
        self.layer4 = nn.Sequential(BasicBlock3d(w[2], w[3], (1, 2, 2)),
                                    BasicBlock3d(w[3], w[3]))
        # pointwise: each cell's activation reads only that cell's features,
        # which keeps the map local enough to serve as a source heatmap
        self.map_conv = nn.Conv3d(w[3], 1, 1)

    def forward(self, video):
        """video: [B, 3, T, H, W] with T % 4 == 0 and H, W % 16 == 0."""
        _, _, t, h, w = video.shape
        if t % 4 != 0:
            raise ValueError(f"frame count {t} not divisible by 4")
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"spatial size {h}x{w} not divisible by 16")
        x = self.stem(video)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        volume = self.layer4(x)
        activation = self.map_conv(volume)            # [B, 1, T', H', W']
        embedding = activation.mean(dim=(3, 4)).squeeze(1)  # [B, T']
        return volume, activation, embedding


class BasicBlock1d(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv1d(in_ch, out_ch, 7, stride=stride, padding=3,
                               padding_mode="circular", bias=False)
        self.bn1 = nn.BatchNorm1d(out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 7, stride=1, padding=3,
                               padding_mode="circular", bias=False)
        self.bn2 = nn.BatchNorm1d(out_ch)
        if in_ch != out_ch or stride != 1:
            self.down = nn.Sequential(
                nn.Conv1d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm1d(out_ch))
        else:
            self.down = None

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.down is not None:
            x = self.down(x)
        return F.relu(x + y)


class SoundEncoder(nn.Module):
    """Strided 1-D residual encoder over raw waveform samples.

    Convolutions shrink the sequence, fractional (adaptive) pooling snaps it
    to T' steps, and a final 1x1 convolution leaves one channel.
    """

    def __init__(self, t_prime: int, width_scale: float = 0.25):
        super().__init__()
        w = [_width(c, width_scale) for c in (64, 64, 128, 256, 512)]
        self.t_prime = t_prime
        self.stem = nn.Sequential(
            nn.Conv1d(1, w[0], 15, stride=4, padding=7, padding_mode="circular", bias=False),
            nn.BatchNorm1d(w[0]),
            nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(
            BasicBlock1d(w[0], w[1], stride=4),
            BasicBlock1d(w[1], w[2], stride=4),
            BasicBlock1d(w[2], w[3], stride=4),
            BasicBlock1d(w[3], w[4], stride=2))
        self.pool = nn.AdaptiveAvgPool1d(t_prime)
        self.head = nn.Conv1d(w[4], 1, 1)

    def forward(self, wave):
        """wave: [B, L] raw samples; returns [B, t_prime]."""
        x = self.stem(wave.unsqueeze(1))
        x = self.blocks(x)
        x = self.pool(x)
        return self.head(x).squeeze(1)


@dataclass
class AmeModel:
    motion: MotionEncoder
    sound: SoundEncoder
    signal: SignalConfig
    width_scale: float

    def eval(self):
        self.motion.eval()
        self.sound.eval()
        return self


def build_ame(signal: SignalConfig, width_scale: float = 0.25) -> AmeModel:
    return AmeModel(motion=MotionEncoder(width_scale),
                    sound=SoundEncoder(signal.t_prime, width_scale),
                    signal=signal, width_scale=width_scale)


# ---------------------------------------------------------------------------
# Distances and the margin objective


def embedding_distance(a, b) -> float:
    """Squared Euclidean distance between two embedding sequences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding length mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def triplet_margin_loss(emb_video: torch.Tensor, emb_aligned: torch.Tensor,
                        emb_misaligned: torch.Tensor,
                        margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """max(d(video, aligned) - d(video, misaligned) + margin, 0), batch mean."""
    d_pos = ((emb_video - emb_aligned) ** 2).sum(dim=-1)
    d_neg = ((emb_video - emb_misaligned) ** 2).sum(dim=-1)
    return F.relu(d_pos - d_neg + margin).mean()


# ---------------------------------------------------------------------------
# Functional (numpy-facing) operations


def encode_motion(model: AmeModel, frames: FrameSequence):
    """Returns (feature volume, activation map, embedding) as numpy arrays."""
    model.motion.eval()
    with torch.no_grad():
        video = torch.from_numpy(frames.values).unsqueeze(0)
        volume, activation, embedding = model.motion(video)
    return (volume[0].numpy(), activation[0].numpy(), embedding[0].numpy())


def encode_sound(model: AmeModel, w: Waveform) -> np.ndarray:
    expected = model.signal.clip_samples
    if len(w) != expected:
        raise ValueError(f"expected {expected} samples "
                         f"({model.signal.clip_seconds}s), got {len(w)}")
    model.sound.eval()
    with torch.no_grad():
        wave = torch.from_numpy(w.samples.astype(np.float32)).unsqueeze(0)
        return model.sound(wave)[0].numpy()


def triplet_loss(model: AmeModel, frames: FrameSequence, x_aligned: Waveform,
                 x_misaligned: Waveform, margin: float = DEFAULT_MARGIN) -> float:
    v = encode_motion(model, frames)[2]
    a = encode_sound(model, x_aligned)
    m = encode_sound(model, x_misaligned)
    return max(embedding_distance(v, a) - embedding_distance(v, m) + margin, 0.0)


def heatmap_from_activation(activation: np.ndarray, num_frames: int,
                            height: int, width: int) -> np.ndarray:
    """Min-max normalize a (1, T', H', W') activation and upsample to T x H x W.

    A constant activation has no spatial preference and maps to all zeros.
    Spatial upsampling is bilinear; time steps are repeated.
    """
    act = np.asarray(activation, dtype=np.float32)
    if act.ndim == 4 and act.shape[0] == 1:
        act = act[0]
    if act.ndim != 3:
        raise ValueError("activation must be (1, T', H', W') or (T', H', W')")
    lo, hi = float(act.min()), float(act.max())
    if hi <= lo:
        return np.zeros((num_frames, height, width), dtype=np.float32)
    norm = (act - lo) / (hi - lo)
    t = torch.from_numpy(norm).unsqueeze(1)  # [T', 1, H', W']
    up = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    up = up.squeeze(1).numpy()
    reps = num_frames // act.shape[0]
    if reps * act.shape[0] != num_frames:
        raise ValueError("frame count must be a multiple of the activation length")
    return np.repeat(up, reps, axis=0)


def localization_heatmap(model: AmeModel, frames: FrameSequence) -> np.ndarray:
    """Per-frame source-location heatmap in [0, 1] of shape T x H x W."""
    _, activation, _ = encode_motion(model, frames)
    t, h, w = frames.num_frames, *frames.frame_size
    return heatmap_from_activation(activation, t, h, w)


# ---------------------------------------------------------------------------
# Training


def _stack_frames(records_cache, idx):
    return torch.from_numpy(np.stack([records_cache[i] for i in idx]))


def augment_clip(values: np.ndarray, rng: np.random.Generator,
                 max_shift: int = 6) -> np.ndarray:
    """Flips and random translation of a [3, T, H, W] clip.

    Edge-replicated padding keeps the canvas statistics; the motion content
    is unchanged, which is what makes this safe for alignment training.
    """
    out = values
    if rng.random() < 0.5:
        out = out[:, :, :, ::-1]
    if rng.random() < 0.5:
        out = out[:, :, ::-1, :]
    if max_shift > 0:
        dy = int(rng.integers(0, 2 * max_shift + 1))
        dx = int(rng.integers(0, 2 * max_shift + 1))
        padded = np.pad(out, ((0, 0), (0, 0), (max_shift, max_shift),
                              (max_shift, max_shift)), mode="edge")
        h, w = values.shape[2], values.shape[3]
        out = padded[:, :, dy:dy + h, dx:dx + w]
    return np.ascontiguousarray(out)


def rotate_pair(frames: np.ndarray, samples: np.ndarray, frame_offset: int):
    """Circularly rotate a video clip and its audio by the same wall-clock
    offset, preserving their alignment.

    Both streams are circular here (shifted negatives are built the same
    way), so every rotation of an aligned pair is again a valid aligned
    pair; this multiplies the effective number of distinct training pairs by
    the frame count and starves clip-identity memorization.
    """
    t = frames.shape[1]
    k = frame_offset % t
    if k == 0:
        return frames, samples
    rolled_frames = np.roll(frames, k, axis=1)
    rolled_audio = np.roll(samples, int(np.rint(k * samples.size / t)))
    return rolled_frames, rolled_audio


def train_ame(records, *, epochs: int = 20, lr: float = 1e-3, momentum: float = 0.9,
              weight_decay: float = 1e-4, batch_size: int = 8, seed: int = 0,
              val_fraction: float = 0.1, margin: float = DEFAULT_MARGIN,
              width_scale: float = 0.25, signal: SignalConfig | None = None,
              shift_range=None, log=print):
    """Fit the embedding encoders on misalignment triplets drawn from scenes.

    Returns (AmeModel, history). History rows carry train loss plus held-out
    triplet loss and retrieval accuracy per epoch. Raises on divergence.
    The learning rate follows a cosine decay and gradients are norm-clipped;
    after the last epoch the activation-map orientation is canonicalized
    (see :func:`orient_motion_map`).
    """
    from .scenes import default_shift_range

    if signal is None:
        signal = SignalConfig()
    torch.manual_seed(seed)
    model = build_ame(signal, width_scale)
    params = list(model.motion.parameters()) + list(model.sound.parameters())
    optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum,
                                weight_decay=weight_decay)

    frames_cache = [r.load_frames().values for r in records]
    audio_cache = [r.load_audio().samples.astype(np.float32) for r in records]
    non_silent = [i for i, a in enumerate(audio_cache) if np.sqrt(np.mean(a**2)) >= 1e-8]
    if len(non_silent) < 4:
        raise ValueError("not enough non-silent scenes to train on")
    split_rng = np.random.default_rng(seed)
    order = split_rng.permutation(non_silent)
    n_val = max(2, int(len(order) * val_fraction))
    val_idx, train_idx = order[:n_val].tolist(), order[n_val:].tolist()
    duration = signal.clip_seconds
    lo, hi = shift_range if shift_range is not None else default_shift_range(duration)
    sr = signal.sample_rate

    def make_batch(idx, rng):
        frames_list, aligned_list = [], []
        for i in idx:
            f, a = rotate_pair(frames_cache[i], audio_cache[i],
                               int(rng.integers(signal.frames)))
            frames_list.append(augment_clip(f, rng))
            aligned_list.append(a)
        frames = torch.from_numpy(np.stack(frames_list))
        aligned = np.stack(aligned_list)
        rolls = np.rint(rng.uniform(lo, hi, size=len(idx)) * sr).astype(int)
        signs = np.where(rng.random(len(idx)) < 0.5, 1, -1)
        mis = np.stack([np.roll(a, int(s * n)) for a, s, n in zip(aligned, signs, rolls)])
        return frames, torch.from_numpy(aligned), torch.from_numpy(mis)

    history = []
    for epoch in range(epochs):
        # cosine decay with a small floor keeps late epochs from thrashing
        decay = 0.5 * (1.0 + np.cos(np.pi * epoch / max(epochs - 1, 1)))
        for group in optimizer.param_groups:
            group["lr"] = lr * max(decay, 0.02)
        rng = np.random.default_rng((seed + 1) * 100_000 + epoch)
        order = rng.permutation(train_idx)
        model.motion.train()
        model.sound.train()
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size].tolist()
            if len(idx) < 2:
                continue  # BatchNorm needs more than one sample
            frames, aligned, mis = make_batch(idx, rng)
            optimizer.zero_grad()
            _, _, emb_v = model.motion(frames)
            emb_a = model.sound(aligned)
            emb_m = model.sound(mis)
            loss = triplet_margin_loss(emb_v, emb_a, emb_m, margin)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 5.0)
            optimizer.step()
            losses.append(float(loss.detach()))
        val_loss, val_acc = evaluate_triplets(
            model, [records[i] for i in val_idx], margin=margin,
            rng=np.random.default_rng(seed * 7 + 13), trials_per_scene=4,
            frames_cache=[frames_cache[i] for i in val_idx],
            audio_cache=[audio_cache[i] for i in val_idx],
            shift_range=(lo, hi))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_loss": val_loss, "val_accuracy": val_acc}
        history.append(row)
        log(f"[ame] epoch {epoch}: train {row['train_loss']:.4f} "
            f"val {val_loss:.4f} acc {val_acc:.3f}")
    flipped = orient_motion_map(model, [frames_cache[i] for i in train_idx[:16]])
    if flipped:
        log("[ame] canonicalized activation-map orientation (sign flip)")
    return model, history


def motion_energy_cells(frames_values: np.ndarray, t_prime: int,
                        h_cells: int, w_cells: int) -> np.ndarray:
    """Label-free motion indicator: frame-difference magnitude pooled onto
    the activation lattice (T' x H' x W')."""
    diffs = np.abs(np.diff(frames_values, axis=1)).mean(axis=0)  # [T-1, H, W]
    t_total = frames_values.shape[1]
    h, w = frames_values.shape[2], frames_values.shape[3]
    out = np.zeros((t_prime, h_cells, w_cells))
    t_step = t_total // t_prime
    h_step, w_step = h // h_cells, w // w_cells
    for ti in range(t_prime):
        sl = diffs[max(ti * t_step - 1, 0):(ti + 1) * t_step - 1]
        if sl.size == 0:
            continue
        pooled = sl.mean(axis=0)
        out[ti] = pooled.reshape(h_cells, h_step, w_cells, w_step).mean(axis=(1, 3))
    return out


def orient_motion_map(model: AmeModel, frames_list) -> bool:
    """Resolve the sign gauge of the activation map against video motion.

    The margin objective is invariant to negating both final heads (all
    pairwise distances are preserved), so the map's orientation is otherwise
    an accident of initialization. The anchor is spatially contrastive: per
    time step, the activation at the highest-motion cell (by frame-difference
    energy) should exceed the spatial mean; if it falls below on average,
    both heads are negated. Purely video-driven, no labels involved.
    Returns True when a flip was applied.
    """
    model.motion.eval()
    scores = []
    with torch.no_grad():
        for values in frames_list:
            video = torch.from_numpy(values).unsqueeze(0)
            _, activation, _ = model.motion(video)
            act = activation[0, 0].numpy()
            energy = motion_energy_cells(values, *act.shape)
            for ti in range(act.shape[0]):
                if energy[ti].max() <= 0:
                    continue
                cell = np.unravel_index(np.argmax(energy[ti]), energy[ti].shape)
                scores.append(act[ti][cell] - act[ti].mean())
    if not scores or float(np.mean(scores)) >= 0.0:
        return False
    with torch.no_grad():
        for p in model.motion.map_conv.parameters():
            p.neg_()
        for p in model.sound.head.parameters():
            p.neg_()
    return True


def evaluate_triplets(model: AmeModel, records, *, margin=DEFAULT_MARGIN, rng=None,
                      trials_per_scene=4, frames_cache=None, audio_cache=None,
                      shift_range=None):
    """Held-out mean triplet loss and aligned-vs-misaligned retrieval accuracy."""
    from .scenes import default_shift_range

    rng = rng if rng is not None else np.random.default_rng(0)
    if frames_cache is None:
        frames_cache = [r.load_frames().values for r in records]
    if audio_cache is None:
        audio_cache = [r.load_audio().samples.astype(np.float32) for r in records]
    duration = model.signal.clip_seconds
    lo, hi = shift_range if shift_range is not None else default_shift_range(duration)
    sr = model.signal.sample_rate
    model.motion.eval()
    model.sound.eval()
    losses, correct, total = [], 0, 0
    with torch.no_grad():
        for i in range(len(records)):
            if np.sqrt(np.mean(audio_cache[i] ** 2)) < 1e-8:
                continue
            video = torch.from_numpy(frames_cache[i]).unsqueeze(0)
            _, _, emb_v = model.motion(video)
            for _ in range(trials_per_scene):
                n = int(np.rint(rng.uniform(lo, hi) * sr))
                sign = 1 if rng.random() < 0.5 else -1
                mis = np.roll(audio_cache[i], sign * n)
                emb_a = model.sound(torch.from_numpy(audio_cache[i]).unsqueeze(0))
                emb_m = model.sound(torch.from_numpy(mis).unsqueeze(0))
                d_pos = float(((emb_v - emb_a) ** 2).sum())
                d_neg = float(((emb_v - emb_m) ** 2).sum())
                losses.append(max(d_pos - d_neg + margin, 0.0))
                correct += int(d_pos < d_neg)
                total += 1
    if total == 0:
        raise ValueError("no usable evaluation triplets")
    return float(np.mean(losses)), correct / total


# ---------------------------------------------------------------------------
# Checkpoints


def save_ame_checkpoint(path, model: AmeModel, history=None, config_echo=None):
    payload = {
        "kind": "ame",
        "width_scale": model.width_scale,
        "signal": {
            "sample_rate": model.signal.sample_rate,
            "clip_seconds": model.signal.clip_seconds,
            "window_size": model.signal.window_size,
            "hop": model.signal.hop,
            "grid_bins": model.signal.grid_bins,
            "grid_frames": model.signal.grid_frames,
            "fps": model.signal.fps,
            "frames": model.signal.frames,
            "frame_size": model.signal.frame_size,
        },
        "motion_state": model.motion.state_dict(),
        "sound_state": model.sound.state_dict(),
        "history": history or [],
        "config_echo": config_echo or {},
    }
    torch.save(payload, path)


def load_ame_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "ame":
        raise ValueError(f"{path} is not an audio-motion embedding checkpoint")
    signal = SignalConfig(**payload["signal"])
    model = build_ame(signal, payload["width_scale"])
    model.motion.load_state_dict(payload["motion_state"])
    model.sound.load_state_dict(payload["sound_state"])
    model.eval()
    return model, payload
