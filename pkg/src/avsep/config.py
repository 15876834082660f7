"""Shared stream/grid geometry presets.

The desk preset is sized so the whole pipeline trains on a laptop CPU while
keeping every architectural stride contract intact (time stride 4, spatial
stride 16, grid stride 16). The full preset mirrors the large-scale geometry
used for shape contracts in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SignalConfig:
    """Geometry of the audio stream, video stream, and spectrogram grid."""

    sample_rate: int = 11025
    clip_seconds: float = 2.0
    window_size: int = 510
    hop: int = 173
    grid_bins: int = 128     # warped frequency rows (H_S)
    grid_frames: int = 128   # time columns (W_S)
    fps: int = 8
    frames: int = 16         # video frames per clip (T)
    frame_size: int = 64     # square frame side (H = W)

    def __post_init__(self):
        if self.frames % 4 != 0:
            raise ValueError("frames must be divisible by 4 (temporal stride)")
        if self.frame_size % 16 != 0:
            raise ValueError("frame_size must be divisible by 16 (spatial stride)")
        if self.grid_bins % 16 != 0 or self.grid_frames % 16 != 0:
            raise ValueError("grid bins/frames must be divisible by 16 (refiner stride)")

    @property
    def clip_samples(self) -> int:
        return round(self.clip_seconds * self.sample_rate)

    @property
    def t_prime(self) -> int:
        return self.frames // 4

    @property
    def freq_bins(self) -> int:
        return self.window_size // 2 + 1


#: Laptop-CPU scale: 2 s clips, 128x128 grids, 16-frame 64x64 video.
DESK = SignalConfig()

#: Large-scale geometry (6 s clips, 256x256 grids, 48-frame 224x224 video).
FULL = SignalConfig(
    sample_rate=11025,
    clip_seconds=6.0,
    window_size=1022,
    hop=256,
    grid_bins=256,
    grid_frames=256,
    fps=8,
    frames=48,
    frame_size=224,
)
