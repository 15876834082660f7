"""Procedural audio-visual scenes with exact ground truth.

A scene is a dark canvas with one sounding sprite and (usually) one silent
distractor. The sounding sprite moves in velocity pulses driven by its onset
pattern, and its audio amplitude envelope *is* its normalized speed, so the
speed/loudness correlation is ~1 by construction. Distractors glide smoothly
with gently modulated speed, making pulsed motion a video-only signature of
sounding-ness. Shape and timbre classes are paired one-to-one, giving the
appearance pathway a class cue that disappears exactly when two scenes share
a class.

Everything is regenerated bit-identically from (manifest, seed): manifests
carry concrete numbers, not distributions.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image

from .audio import Waveform, mix, shift, write_wav, read_wav

SHAPE_CLASSES = ("circle", "ring", "square", "triangle", "diamond", "cross", "star", "bar")
TIMBRE_CLASSES = ("sine", "square_wave", "saw", "triangle_wave", "fm", "pluck", "noise", "chirp")
NUM_CLASSES = len(SHAPE_CLASSES)

#: per-class fundamental registers (Hz), ~4 semitones apart
CLASS_FUNDAMENTALS = (220.0, 277.2, 349.2, 440.0, 554.4, 698.5, 880.0, 1108.7)

CLASS_COLORS = (
    (0.90, 0.25, 0.21),
    (0.26, 0.52, 0.96),
    (0.24, 0.73, 0.33),
    (0.98, 0.74, 0.02),
    (0.67, 0.28, 0.74),
    (0.12, 0.76, 0.83),
    (0.96, 0.49, 0.14),
    (0.91, 0.31, 0.60),
)
DISTRACTOR_COLOR = (0.34, 0.34, 0.34)
BACKGROUND = 0.08

_PULSE_HALF_WIDTH = 0.16  # seconds; motion burst half-width


@dataclass(frozen=True)
class FrameSequence:
    """Video clip as a 3 x T x H x W float tensor in [0, 1]."""

    values: np.ndarray
    fps: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 4 or vals.shape[0] != 3:
            raise ValueError("frame tensor must be 3 x T x H x W")
        if vals.shape[1] % 4 != 0:
            raise ValueError("frame count must be divisible by 4")
        object.__setattr__(self, "values", vals)

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


@dataclass(frozen=True)
class SpriteSpec:
    """Concrete parameters of one sprite (no distributions, all numbers)."""

    shape_class: str
    timbre_class: str
    sounding: bool
    onset_pattern: tuple  # ((time_s, strength), ...) for pulsed movers
    start_x: float
    start_y: float
    heading: float        # radians
    radius: float         # pixels
    fundamental_hz: float
    seed: int
    motion: str = "pulse"         # "pulse" (sounding) or "glide" (distractor)
    peak_speed: float = 70.0      # px/s at pulse peak
    glide_speed: float = 15.0     # px/s for glide motion
    glide_mod_hz: float = 0.5
    glide_mod_phase: float = 0.0

    def __post_init__(self):
        if self.shape_class not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {self.shape_class!r}")
        if self.timbre_class not in TIMBRE_CLASSES:
            raise ValueError(f"unknown timbre class {self.timbre_class!r}")
        if self.motion not in ("pulse", "glide"):
            raise ValueError(f"unknown motion profile {self.motion!r}")
        object.__setattr__(self, "onset_pattern",
                           tuple((float(t), float(s)) for t, s in self.onset_pattern))


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    duration: float
    fps: int
    frame_size: int
    sample_rate: int
    seed: int
    sprites: tuple

    def __post_init__(self):
        object.__setattr__(self, "sprites", tuple(self.sprites))

    @property
    def num_frames(self) -> int:
        return round(self.duration * self.fps)

    @property
    def num_samples(self) -> int:
        return round(self.duration * self.sample_rate)


@dataclass(frozen=True)
class GroundTruth:
    """Exact per-sprite component audio and per-frame boxes for the sounding sprite."""

    component_waveforms: tuple
    boxes: np.ndarray      # (T, 4) as (x0, y0, x1, y1)
    sounding_index: int


def validate_manifest(manifest: SceneManifest) -> None:
    """Reject manifests that cannot produce a legal scene."""
    n_sounding = sum(1 for s in manifest.sprites if s.sounding)
    if n_sounding != 1:
        raise ValueError(f"exactly one sounding sprite required, got {n_sounding}")
    if manifest.num_frames % 4 != 0:
        raise ValueError("duration * fps must be divisible by 4")
    size = manifest.frame_size
    for s in manifest.sprites:
        margin = s.radius
        if not (margin <= s.start_x <= size - 1 - margin and
                margin <= s.start_y <= size - 1 - margin):
            raise ValueError(
                f"sprite trajectory leaves the frame: start ({s.start_x:.1f}, "
                f"{s.start_y:.1f}) with radius {s.radius:.1f} in a {size}px frame"
            )
        for t, strength in s.onset_pattern:
            if not 0.0 <= t < manifest.duration:
                raise ValueError(f"onset at {t:.3f}s outside clip of {manifest.duration}s")
            if strength <= 0.0:
                raise ValueError("onset strengths must be positive")
        if not 20.0 < s.fundamental_hz < 0.45 * manifest.sample_rate:
            raise ValueError("fundamental outside the representable band")


# ---------------------------------------------------------------------------
# Motion


def _speed_profile(spec: SpriteSpec, t: np.ndarray) -> np.ndarray:
    """Speed |velocity| in px/s on the time grid ``t``."""
    if spec.motion == "pulse":
        speed = np.zeros_like(t)
        for onset, strength in spec.onset_pattern:
            u = (t - onset) / _PULSE_HALF_WIDTH
            inside = np.abs(u) <= 1.0
            speed[inside] += strength * 0.5 * (1.0 + np.cos(np.pi * u[inside]))
        return spec.peak_speed * speed
    phase = 2.0 * np.pi * spec.glide_mod_hz * t + spec.glide_mod_phase
    return spec.glide_speed * (1.0 + 0.3 * np.sin(phase))


def _fold(u: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # reflect an unbounded coordinate into [lo, hi]
    span = hi - lo
    r = np.mod(u - lo, 2.0 * span)
    return lo + span - np.abs(span - r)


def sprite_positions(spec: SpriteSpec, manifest: SceneManifest, times: np.ndarray) -> np.ndarray:
    """Sprite center (x, y) at each requested time, bouncing off frame walls."""
    # integrate speed on a fine grid, then sample the displacement
    sr = manifest.sample_rate
    fine_t = np.arange(manifest.num_samples) / sr
    speed = _speed_profile(spec, fine_t)
    displacement = np.concatenate([[0.0], np.cumsum(speed)[:-1]]) / sr
    disp_at = np.interp(times, fine_t, displacement)
    lo = spec.radius
    hi = manifest.frame_size - 1 - spec.radius
    x = _fold(spec.start_x + disp_at * np.cos(spec.heading), lo, hi)
    y = _fold(spec.start_y + disp_at * np.sin(spec.heading), lo, hi)
    return np.stack([x, y], axis=1)


# ---------------------------------------------------------------------------
# Audio synthesis


def _tone(spec: SpriteSpec, t: np.ndarray, sample_rate: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    f0 = spec.fundamental_hz
    fmax = 0.45 * sample_rate
    kind = spec.timbre_class
    if kind == "sine":
        wave = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    elif kind == "square_wave":
        ks = np.arange(1, int(fmax / f0) + 1, 2)
        wave = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in ks)
    elif kind == "saw":
        ks = np.arange(1, int(fmax / f0) + 1)
        wave = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in ks)
    elif kind == "triangle_wave":
        ks = np.arange(1, int(fmax / f0) + 1, 2)
        wave = sum(((-1.0) ** ((k - 1) // 2)) * np.sin(2 * np.pi * k * f0 * t) / k**2
                   for k in ks)
    elif kind == "fm":
        mod = np.sin(2 * np.pi * 2.01 * f0 * t + rng.uniform(0, 2 * np.pi))
        wave = np.sin(2 * np.pi * f0 * t + 3.0 * mod)
    elif kind == "pluck":
        ks = np.arange(1, min(12, int(fmax / f0)) + 1)
        phases = rng.uniform(0, 2 * np.pi, size=ks.size)
        wave = sum(np.sin(2 * np.pi * k * f0 * t + p) / k**1.5
                   for k, p in zip(ks, phases))
    elif kind == "noise":
        white = rng.standard_normal(t.size)
        spec_f = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(t.size, 1.0 / sample_rate)
        band = (freqs >= 2.0 * f0) & (freqs <= min(5.0 * f0, fmax))
        spec_f[~band] = 0.0
        wave = np.fft.irfft(spec_f, n=t.size)
    elif kind == "chirp":
        # slow vibrato: f(t) = f0 (1 + 0.25 sin(2 pi 0.8 t + phi))
        phi = rng.uniform(0, 2 * np.pi)
        inst_phase = 2 * np.pi * f0 * (
            t - 0.25 / (2 * np.pi * 0.8) * (np.cos(2 * np.pi * 0.8 * t + phi) - np.cos(phi))
        )
        wave = np.sin(inst_phase)
    else:  # pragma: no cover
        raise ValueError(kind)
    peak = np.max(np.abs(wave))
    return wave / peak if peak > 0 else wave


def _sprite_audio(spec: SpriteSpec, manifest: SceneManifest) -> np.ndarray:
    if not spec.sounding:
        return np.zeros(manifest.num_samples)
    sr = manifest.sample_rate
    t = np.arange(manifest.num_samples) / sr
    speed = _speed_profile(spec, t)
    peak = speed.max()
    if peak <= 0:
        return np.zeros(manifest.num_samples)
    envelope = speed / peak
    x = envelope * _tone(spec, t, sr)
    amp = np.max(np.abs(x))
    return 0.5 * x / amp if amp > 0 else x


# ---------------------------------------------------------------------------
# Rendering


def _shape_alpha(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "ring":
        d2 = dx**2 + dy**2
        return ((0.55 * r) ** 2 <= d2) & (d2 <= r**2)
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape == "triangle":
        return (dy <= 0.72 * r) & (dy >= -r) & (np.abs(dx) <= 0.95 * r * (dy + r) / (1.72 * r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "cross":
        return ((np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r))
    if shape == "star":
        return np.abs(dx) ** (2 / 3) + np.abs(dy) ** (2 / 3) <= r ** (2 / 3)
    if shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.4 * r)
    raise ValueError(f"unknown shape {shape!r}")  # pragma: no cover


def _background_canvas(seed: int, size: int) -> np.ndarray:
    """Static per-scene background: dark base plus smooth random shading.

    Backgrounds differ across scenes (as in real footage), so features that
    respond to static scenery carry cross-scene noise into the embedding and
    get suppressed; only motion survives as a reliable cue.
    """
    rng = np.random.default_rng(seed)
    coords = np.linspace(0.0, 1.0, size)
    xx, yy = np.meshgrid(coords, coords)
    canvas = np.full((size, size, 3), 0.06 + 0.04 * rng.random())
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.uniform(0.02, 0.06)
        wave = np.sin(2 * np.pi * fx * xx + px) * np.sin(2 * np.pi * fy * yy + py)
        canvas += amp * wave[..., None] * rng.uniform(0.4, 1.0, size=3)
    return np.clip(canvas, 0.02, 0.35)


def _render_frames(manifest: SceneManifest) -> tuple[np.ndarray, np.ndarray]:
    """Render all frames; returns (3 x T x H x W tensor, (T, 4) sounding boxes)."""
    size = manifest.frame_size
    n_frames = manifest.num_frames
    frame_times = (np.arange(n_frames) + 0.5) / manifest.fps
    # 2x supersampled pixel-center coordinates
    ss = 2
    coords = (np.arange(size * ss) + 0.5) / ss - 0.5
    gx, gy = np.meshgrid(coords, coords)  # [H*ss, W*ss], x along columns
    background = np.repeat(np.repeat(_background_canvas(manifest.seed, size),
                                     ss, axis=0), ss, axis=1)

    tensor = np.empty((3, n_frames, size, size), dtype=np.float32)
    boxes = np.zeros((n_frames, 4))
    per_sprite_positions = [sprite_positions(s, manifest, frame_times) for s in manifest.sprites]
    # paint distractors first so the sounding sprite stays visible on overlap
    draw_order = sorted(zip(manifest.sprites, per_sprite_positions), key=lambda sp: sp[0].sounding)
    for f in range(n_frames):
        canvas = background.copy()
        for spec, pos in draw_order:
            cx, cy = pos[f]
            mask = _shape_alpha(spec.shape_class, gx - cx, gy - cy, spec.radius)
            color = (CLASS_COLORS[SHAPE_CLASSES.index(spec.shape_class)]
                     if spec.sounding else DISTRACTOR_COLOR)
            canvas[mask] = color
            if spec.sounding:
                boxes[f] = (max(0.0, cx - spec.radius), max(0.0, cy - spec.radius),
                            min(float(size), cx + spec.radius), min(float(size), cy + spec.radius))
        down = canvas.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
        tensor[:, f] = down.transpose(2, 0, 1)
    return tensor, boxes


# ---------------------------------------------------------------------------
# Scene assembly


def _draw_onset_times(rng: np.random.Generator, count: int, duration: float,
                      min_gap: float) -> np.ndarray:
    """Uniform onset times over (almost) the whole clip with a minimum gap."""
    for _ in range(200):
        times = np.sort(rng.uniform(0.02, duration - 0.02, size=count))
        if count == 1 or np.min(np.diff(times)) >= min_gap:
            return times
    # extremely unlikely fallback: evenly spread with jitter inside the gap
    base = np.linspace(0.05, duration - 0.05, count)
    jittered = base + rng.uniform(-min_gap / 4, min_gap / 4, size=count)
    return np.clip(jittered, 0.02, duration - 0.02)


def generate_scene(manifest: SceneManifest) -> tuple[FrameSequence, Waveform, GroundTruth]:
    """Deterministically realize a manifest into frames, audio, and ground truth."""
    validate_manifest(manifest)
    tensor, boxes = _render_frames(manifest)
    components = [Waveform(_sprite_audio(s, manifest), manifest.sample_rate)
                  for s in manifest.sprites]
    scene_audio = mix(components)
    sounding_index = next(i for i, s in enumerate(manifest.sprites) if s.sounding)
    gt = GroundTruth(component_waveforms=tuple(components), boxes=boxes,
                     sounding_index=sounding_index)
    return FrameSequence(values=tensor, fps=manifest.fps), scene_audio, gt


def sample_manifest(scene_id: str, rng: np.random.Generator, *,
                    duration: float = 2.0, fps: int = 8, frame_size: int = 64,
                    sample_rate: int = 11025, timbre_class: str | None = None,
                    with_distractor: bool = True) -> SceneManifest:
    """Draw a concrete scene description. All numbers end up in the manifest."""
    cls = (TIMBRE_CLASSES.index(timbre_class) if timbre_class is not None
           else int(rng.integers(NUM_CLASSES)))
    n_onsets = int(rng.integers(3, 6))
    # aperiodic onset layout: uniform times with a minimum gap, so circular
    # shifts cannot alias the pulse train back onto itself
    times = _draw_onset_times(rng, n_onsets, duration, min_gap=0.36)
    strengths = rng.uniform(0.4, 1.0, size=len(times))
    radius = float(rng.uniform(10.0, 13.0))
    margin = radius + 1.0
    sprites = [SpriteSpec(
        shape_class=SHAPE_CLASSES[cls],
        timbre_class=TIMBRE_CLASSES[cls],
        sounding=True,
        onset_pattern=tuple(zip(times.tolist(), strengths.tolist())),
        start_x=float(rng.uniform(margin, frame_size - 1 - margin)),
        start_y=float(rng.uniform(margin, frame_size - 1 - margin)),
        heading=float(rng.uniform(0, 2 * np.pi)),
        radius=radius,
        fundamental_hz=float(CLASS_FUNDAMENTALS[cls] * 2.0 ** (rng.uniform(-1, 1) / 12.0)),
        seed=int(rng.integers(2**31)),
        motion="pulse",
        peak_speed=float(rng.uniform(40.0, 65.0)),
    )]
    if with_distractor:
        d_cls = int(rng.integers(NUM_CLASSES))
        d_radius = float(rng.uniform(5.0, 7.0))
        d_margin = d_radius + 1.0
        sprites.append(SpriteSpec(
            shape_class=SHAPE_CLASSES[d_cls],
            timbre_class=TIMBRE_CLASSES[d_cls],
            sounding=False,
            onset_pattern=(),
            start_x=float(rng.uniform(d_margin, frame_size - 1 - d_margin)),
            start_y=float(rng.uniform(d_margin, frame_size - 1 - d_margin)),
            heading=float(rng.uniform(0, 2 * np.pi)),
            radius=d_radius,
            fundamental_hz=float(CLASS_FUNDAMENTALS[d_cls]),
            seed=int(rng.integers(2**31)),
            motion="glide",
            glide_speed=float(rng.uniform(6.0, 14.0)),
            glide_mod_hz=float(rng.uniform(0.3, 0.7)),
            glide_mod_phase=float(rng.uniform(0, 2 * np.pi)),
        ))
    return SceneManifest(scene_id=scene_id, duration=duration, fps=fps,
                         frame_size=frame_size, sample_rate=sample_rate,
                         seed=int(rng.integers(2**31)), sprites=tuple(sprites))


def make_mixture_pair(scenes: Sequence[SceneManifest]):
    """Sum the audio of N scenes into one mixture with per-scene ground truth."""
    if len(scenes) < 2:
        raise ValueError("need at least 2 scenes to build a mixture")
    durations = {round(s.duration, 9) for s in scenes}
    if len(durations) != 1:
        raise ValueError(f"scene durations differ: {sorted(durations)}")
    generated = [generate_scene(m) for m in scenes]
    mixture = mix([audio for _, audio, _ in generated])
    return mixture, [frames for frames, _, _ in generated], [gt for _, _, gt in generated]


def default_shift_range(duration: float) -> tuple[float, float]:
    """Two-sided misalignment magnitudes: duration/8 .. 3/4 duration."""
    return duration / 8.0, 0.75 * duration


def sample_triplet(scene, shift_range: tuple[float, float] | None = None,
                   rng: np.random.Generator | None = None):
    """Misalignment triplet (frames, aligned audio, circularly shifted audio).

    ``scene`` is a manifest or an already generated (frames, audio, gt)
    triple. Silent scenes are rejected so callers can resample.
    """
    if isinstance(scene, SceneManifest):
        frames, aligned, _ = generate_scene(scene)
        duration = scene.duration
    else:
        frames, aligned = scene[0], scene[1]
        duration = aligned.duration
    if shift_range is None:
        shift_range = default_shift_range(duration)
    lo, hi = shift_range
    if not 0.0 < lo < hi < duration:
        raise ValueError(f"degenerate shift range ({lo}, {hi}) for a {duration}s clip")
    if aligned.rms() < 1e-8:
        raise ValueError("silent scene; resample another triplet")
    rng = rng if rng is not None else np.random.default_rng()
    magnitude = rng.uniform(lo, hi)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    misaligned = shift(aligned, sign * magnitude)
    return frames, aligned, misaligned


# ---------------------------------------------------------------------------
# Dataset persistence
#
# Layout: <root>/<scene_id>/frames/%05d.png, audio.wav, manifest.json,
# gt_boxes.csv (frame_index, x0, y0, x1, y1)


def _manifest_to_dict(m: SceneManifest) -> dict:
    d = dataclasses.asdict(m)
    d["sprites"] = [dataclasses.asdict(s) for s in m.sprites]
    return d


def _manifest_from_dict(d: dict) -> SceneManifest:
    sprites = tuple(SpriteSpec(**{**s, "onset_pattern": tuple(map(tuple, s["onset_pattern"]))})
                    for s in d["sprites"])
    return SceneManifest(scene_id=d["scene_id"], duration=d["duration"], fps=d["fps"],
                         frame_size=d["frame_size"], sample_rate=d["sample_rate"],
                         seed=d["seed"], sprites=sprites)


def write_scene(manifest: SceneManifest, scene_dir: Path) -> None:
    frames, scene_audio, gt = generate_scene(manifest)
    scene_dir = Path(scene_dir)
    (scene_dir / "frames").mkdir(parents=True, exist_ok=True)
    with open(scene_dir / "manifest.json", "w") as fh:
        json.dump(_manifest_to_dict(manifest), fh, indent=1)
    write_wav(scene_dir / "audio.wav", scene_audio, fmt="float32")
    for f in range(frames.num_frames):
        img = np.clip(frames.values[:, f].transpose(1, 2, 0) * 255.0, 0, 255)
        Image.fromarray(np.rint(img).astype(np.uint8)).save(
            scene_dir / "frames" / f"{f:05d}.png")
    with open(scene_dir / "gt_boxes.csv", "w") as fh:
        fh.write("frame_index,x0,y0,x1,y1\n")
        for f, (x0, y0, x1, y1) in enumerate(gt.boxes):
            fh.write(f"{f},{x0:.4f},{y0:.4f},{x1:.4f},{y1:.4f}\n")


def write_dataset(manifests: Sequence[SceneManifest], out_dir, force: bool = False) -> list[Path]:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force)")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in manifests:
        scene_dir = out / m.scene_id
        write_scene(m, scene_dir)
        paths.append(scene_dir)
    return paths


@dataclass
class SceneRecord:
    """Lazy handle to one on-disk scene."""

    manifest: SceneManifest
    path: Path

    def load_frames(self) -> FrameSequence:
        n = self.manifest.num_frames
        frames = []
        for f in range(n):
            p = self.path / "frames" / f"{f:05d}.png"
            if not p.exists():
                raise FileNotFoundError(f"missing frame file {p}")
            frames.append(np.asarray(Image.open(p), dtype=np.float32) / 255.0)
        tensor = np.stack(frames).transpose(3, 0, 1, 2)
        return FrameSequence(values=tensor, fps=self.manifest.fps)

    def load_audio(self) -> Waveform:
        return read_wav(self.path / "audio.wav")

    def load_boxes(self) -> np.ndarray:
        rows = np.loadtxt(self.path / "gt_boxes.csv", delimiter=",", skiprows=1)
        rows = np.atleast_2d(rows)
        return rows[:, 1:5]

    def component_waveforms(self) -> list[Waveform]:
        scene_audio = self.load_audio()
        out = []
        for s in self.manifest.sprites:
            if s.sounding:
                out.append(scene_audio)
            else:
                out.append(Waveform(np.zeros(len(scene_audio)), scene_audio.sample_rate))
        return out

    @property
    def timbre_class(self) -> str:
        return next(s.timbre_class for s in self.manifest.sprites if s.sounding)


def read_scene(scene_dir) -> SceneRecord:
    scene_dir = Path(scene_dir)
    manifest_path = scene_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {scene_dir}")
    with open(manifest_path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"corrupt manifest {manifest_path}: {e}") from e
    return SceneRecord(manifest=_manifest_from_dict(data), path=scene_dir)


def read_dataset(root) -> list[SceneRecord]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    records = []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (scene_dir / "manifest.json").exists():
            continue
        records.append(read_scene(scene_dir))
    if not records:
        raise FileNotFoundError(f"no scenes found under {root}")
    return records
