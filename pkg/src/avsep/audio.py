"""Waveforms, spectrograms, warped magnitude grids, and binary-mask algebra.

Every operation here is a pure function over immutable value objects, safe to
call from any number of workers. STFTs are centered: the signal is
reflect-padded by half a window on each side, so ``istft(stft(x), len(x))``
reconstructs ``x`` to machine precision and every original sample sits under
full window coverage.

Separated waveforms always reuse the mixture phase; masks only ever touch
magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
from scipy.io import wavfile as _wavfile

DEFAULT_SAMPLE_RATE = 11025

#: reconstruction refuses to divide by window-energy sums below this
_DENOM_FLOOR = 1e-10


def _as_samples(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"waveform must be 1-D, got shape {arr.shape}")
    if arr.size < 1:
        raise ValueError("waveform must contain at least one sample")
    if not np.all(np.isfinite(arr)):
        raise ValueError("waveform contains non-finite values")
    return arr


@dataclass(frozen=True)
class Waveform:
    """A mono audio signal plus its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "samples", _as_samples(self.samples))
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be a positive integer")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Linear-frequency complex STFT, one column per frame.

    ``values`` has shape ``[window_size // 2 + 1, frames]``. ``hop`` may be
    any positive integer; reconstruction checks window-energy coverage and
    refuses degenerate (gapped) configurations.
    """

    values: np.ndarray
    window_size: int
    hop: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.complex128)
        if vals.ndim != 2:
            raise ValueError("spectrogram values must be 2-D [freq, frames]")
        if self.window_size < 2 or self.window_size % 2 != 0:
            raise ValueError("window_size must be a positive even integer")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        expected = self.window_size // 2 + 1
        if vals.shape[0] != expected:
            raise ValueError(
                f"expected {expected} frequency bins for window {self.window_size}, "
                f"got {vals.shape[0]}"
            )
        object.__setattr__(self, "values", vals)

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def length_bounds(self) -> tuple[int, int]:
        """Inclusive range of signal lengths this spectrogram can restore."""
        lo = self.hop * (self.frames - 1)
        return max(lo, 1), self.hop * self.frames - 1


@dataclass(frozen=True)
class FreqWarp:
    """Mapping between linear STFT bins and a coarser log-spaced grid.

    ``centers[i]`` is the (fractional) linear bin sampled by warped row
    ``i``; ``nearest[l]`` is the warped row closest to linear bin ``l``.
    When the grids have equal size the map is the identity.
    """

    num_linear: int
    num_warped: int
    centers: np.ndarray
    nearest: np.ndarray


def make_freq_warp(num_linear: int, num_warped: int, min_bin: float | None = None) -> FreqWarp:
    """Build a log-spaced frequency warp.

    Centers run geometrically from ``min_bin`` (default ``num_linear / 64``)
    up to the top linear bin, keeping most of the grid resolution in the
    low-frequency range where the synthetic timbres live. ``num_warped ==
    num_linear`` yields the identity map.
    """
    if num_warped < 2 or num_linear < 2:
        raise ValueError("warp needs at least 2 bins on both grids")
    if num_warped > num_linear:
        raise ValueError("warped grid cannot be finer than the linear grid")
    if num_warped == num_linear:
        centers = np.arange(num_linear, dtype=np.float64)
    else:
        lo = float(min_bin) if min_bin is not None else max(1.0, num_linear / 64.0)
        if not 0 < lo < num_linear - 1:
            raise ValueError("min_bin must lie strictly inside the linear range")
        ratio = (num_linear - 1) / lo
        centers = lo * ratio ** (np.arange(num_warped) / (num_warped - 1))
    # nearest warped row per linear bin; ties resolve to the lower row
    edges = 0.5 * (centers[:-1] + centers[1:])
    nearest = np.searchsorted(edges, np.arange(num_linear), side="left")
    return FreqWarp(num_linear=num_linear, num_warped=num_warped,
                    centers=centers, nearest=nearest.astype(np.int64))


@dataclass(frozen=True)
class MagGrid:
    """Non-negative magnitude grid on the warped (rows) x time (cols) lattice.

    Carries the warp descriptor and the time placement (``time_start`` within
    the source spectrogram, which had ``source_frames`` columns) so masks
    derived from it can be mapped back to full resolution.
    """

    values: np.ndarray
    warp: FreqWarp
    time_start: int = 0
    source_frames: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("grid values must be 2-D")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("grid values must be finite and non-negative")
        if vals.shape[0] != self.warp.num_warped:
            raise ValueError("grid rows do not match warp size")
        object.__setattr__(self, "values", vals)
        if self.source_frames == 0:
            object.__setattr__(self, "source_frames", vals.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BinaryMask:
    """Strictly binary mask over a MagGrid lattice (same placement metadata)."""

    values: np.ndarray
    warp: FreqWarp
    time_start: int = 0
    source_frames: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("mask values must be 2-D")
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        if vals.shape[0] != self.warp.num_warped:
            raise ValueError("mask rows do not match warp size")
        object.__setattr__(self, "values", vals)
        if self.source_frames == 0:
            object.__setattr__(self, "source_frames", vals.shape[1])

    @classmethod
    def like(cls, grid: MagGrid, values: np.ndarray) -> "BinaryMask":
        return cls(values=values, warp=grid.warp,
                   time_start=grid.time_start, source_frames=grid.source_frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# STFT / iSTFT


def stft(w: Waveform, window_size: int = 1022, hop: int = 256) -> ComplexSpectrogram:
    """Centered Hann-window STFT.

    Raises if the signal is shorter than one window. Frame count is
    ``1 + len(w) // hop``.
    """
    if window_size % 2 != 0 or window_size < 2:
        raise ValueError("window_size must be a positive even integer")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    n = len(w)
    if n < window_size:
        raise ValueError(f"signal too short: {n} samples < window {window_size}")
    half = window_size // 2
    padded = np.pad(w.samples, half, mode="reflect")
    frames = 1 + n // hop
    window = np.hanning(window_size)
    starts = np.arange(frames) * hop
    segs = np.lib.stride_tricks.sliding_window_view(padded, window_size)[starts]
    spec = np.fft.rfft(segs * window, axis=1).T
    return ComplexSpectrogram(values=spec, window_size=window_size, hop=hop,
                              sample_rate=w.sample_rate)


def istft(s: ComplexSpectrogram, length: int) -> Waveform:
    """Weighted overlap-add reconstruction, normalized by window energy.

    ``length`` must be consistent with the frame count (within one hop of
    the implied signal length). Raises if any output sample would be divided
    by a (near-)zero window-energy sum, e.g. for gapped hop configurations.
    """
    if length < 1:
        raise ValueError("length must be positive")
    if 1 + length // s.hop != s.frames:
        raise ValueError(
            f"length {length} inconsistent with {s.frames} frames at hop {s.hop}"
        )
    window = np.hanning(s.window_size)
    half = s.window_size // 2
    padded_len = s.hop * (s.frames - 1) + s.window_size
    acc = np.zeros(padded_len)
    den = np.zeros(padded_len)
    segs = np.fft.irfft(s.values.T, n=s.window_size, axis=1)
    wsq = window**2
    for f in range(s.frames):
        start = f * s.hop
        acc[start:start + s.window_size] += window * segs[f]
        den[start:start + s.window_size] += wsq
    out_den = den[half:half + length]
    if out_den.size < length or np.any(out_den < _DENOM_FLOOR):
        raise ValueError("zero-energy window normalization; hop/window leave gaps")
    samples = acc[half:half + length] / out_den
    return Waveform(samples=samples, sample_rate=s.sample_rate)


# ---------------------------------------------------------------------------
# Warped magnitude grids and masks


def warp_array(mag: np.ndarray, warp: FreqWarp, frames: int) -> tuple[np.ndarray, int]:
    """Warp a raw magnitude array [num_linear, T]; returns (grid, time_start).

    Shared by :func:`warp_magnitude` and the training fast path so the warp
    semantics exist exactly once.
    """
    if mag.shape[0] != warp.num_linear:
        raise ValueError("magnitude rows do not match the warp")
    lo = np.clip(np.floor(warp.centers).astype(np.int64), 0, warp.num_linear - 2)
    frac = np.clip(warp.centers - lo, 0.0, 1.0)
    warped = mag[lo] * (1.0 - frac)[:, None] + mag[lo + 1] * frac[:, None]
    src = mag.shape[1]
    t0 = max(0, (src - frames) // 2)
    used = min(src, frames)
    out = np.zeros((warp.num_warped, frames), dtype=mag.dtype)
    out[:, :used] = warped[:, t0:t0 + used]
    return out, t0


def warp_magnitude(s: ComplexSpectrogram, bins: int = 256, frames: int = 256,
                   min_bin: float | None = None,
                   warp: FreqWarp | None = None) -> MagGrid:
    """Magnitude of ``s`` resampled onto a log-spaced ``bins x frames`` grid.

    Frequency rows are linearly interpolated at the warp centers. The time
    axis is center-cropped when the spectrogram has more columns than
    ``frames`` and zero-padded at the end when it has fewer.
    """
    if warp is None:
        warp = make_freq_warp(s.freq_bins, bins, min_bin=min_bin)
    elif warp.num_linear != s.freq_bins or warp.num_warped != bins:
        raise ValueError("warp descriptor does not match requested geometry")
    values, t0 = warp_array(np.abs(s.values), warp, frames)
    return MagGrid(values=values, warp=warp, time_start=t0, source_frames=s.frames)


def unwarp_mask(m: BinaryMask, target: ComplexSpectrogram) -> np.ndarray:
    """Map a warped-grid binary mask back onto the full linear-frequency grid.

    Nearest-neighbor on the frequency axis; time columns outside the warped
    window (from center-cropping) receive 0. An all-ones mask whose window
    covers the whole spectrogram unwarps to all-ones.
    """
    if target.freq_bins != m.warp.num_linear:
        raise ValueError("target frequency bins do not match the warp")
    if m.source_frames != target.frames:
        raise ValueError("mask was derived from a different frame count")
    full = np.zeros((target.freq_bins, target.frames))
    used = min(m.shape[1], target.frames - m.time_start)
    full[:, m.time_start:m.time_start + used] = m.values[m.warp.nearest, :used]
    return full


def dominance_masks(stack: np.ndarray) -> np.ndarray:
    """Per-component dominance masks for a stack [N, ...] of magnitudes.

    mask[n] is 1 where component n is >= every other component; ties set
    every tied winner, so the masks cover every cell.
    """
    stack = np.asarray(stack)
    if stack.shape[0] < 2:
        raise ValueError("need at least 2 components")
    out = np.empty_like(stack, dtype=np.float64)
    for n in range(stack.shape[0]):
        others = np.delete(stack, n, axis=0)
        out[n] = (stack[n] >= others.max(axis=0)).astype(np.float64)
    return out


def ideal_binary_mask(components: Sequence[MagGrid], n: int) -> BinaryMask:
    """Dominance mask: 1 where component ``n`` is >= every other component.

    Ties count as 1 for every tied component, so the N masks always cover
    every cell.
    """
    if len(components) < 2:
        raise ValueError("need at least 2 components")
    if not 0 <= n < len(components):
        raise ValueError(f"component index {n} out of range")
    shape = components[0].shape
    for c in components[1:]:
        if c.shape != shape:
            raise ValueError("component grids must share one shape")
    values = dominance_masks(np.stack([c.values for c in components]))[n]
    return BinaryMask.like(components[n], values)


def apply_mask(mask: Union[BinaryMask, np.ndarray],
               mix: Union[MagGrid, ComplexSpectrogram]):
    """Element-wise product of a binary mask with a grid or spectrogram.

    For complex spectrograms the mask must already be at full resolution
    (see :func:`unwarp_mask`); the mixture phase is retained untouched.
    """
    mvals = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=np.float64)
    if not np.all((mvals == 0.0) | (mvals == 1.0)):
        raise ValueError("mask entries must be exactly 0 or 1")
    if isinstance(mix, MagGrid):
        if mvals.shape != mix.shape:
            raise ValueError(f"mask shape {mvals.shape} != grid shape {mix.shape}")
        return replace(mix, values=mix.values * mvals)
    if isinstance(mix, ComplexSpectrogram):
        if mvals.shape != mix.values.shape:
            raise ValueError(
                f"mask shape {mvals.shape} != spectrogram shape {mix.values.shape}; "
                "unwarp the mask first"
            )
        return replace(mix, values=mix.values * mvals)
    raise TypeError(f"cannot mask object of type {type(mix).__name__}")


# ---------------------------------------------------------------------------
# Mixing and shifting


def mix(ws: Sequence[Waveform]) -> Waveform:
    """Sample-wise sum; inputs are cropped to the shortest length."""
    if not ws:
        raise ValueError("nothing to mix")
    rate = ws[0].sample_rate
    for w in ws[1:]:
        if w.sample_rate != rate:
            raise ValueError(f"sample-rate mismatch: {w.sample_rate} != {rate}")
    n = min(len(w) for w in ws)
    total = np.zeros(n)
    for w in ws:
        total += w.samples[:n]
    return Waveform(samples=total, sample_rate=rate)


def shift(w: Waveform, offset_seconds: float) -> Waveform:
    """Circular time shift by ``offset_seconds`` (positive = content later).

    Circularity keeps the energy statistics of shifted audio identical to
    the original. The offset magnitude must be smaller than the clip
    duration.
    """
    if abs(offset_seconds) >= w.duration:
        raise ValueError(
            f"|offset| {abs(offset_seconds):.3f}s must be < duration {w.duration:.3f}s"
        )
    n = int(np.rint(offset_seconds * w.sample_rate))
    return Waveform(samples=np.roll(w.samples, n), sample_rate=w.sample_rate)


# ---------------------------------------------------------------------------
# Persistence: WAV files and tensor containers


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write a waveform as 32-bit float ("float32") or 16-bit PCM ("pcm16")."""
    if fmt == "float32":
        _wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
    elif fmt == "pcm16":
        quantized = np.clip(np.rint(w.samples * 32768.0), -32768, 32767)
        _wavfile.write(path, w.sample_rate, quantized.astype(np.int16))
    else:
        raise ValueError(f"unknown wav format {fmt!r}")


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM or 32-bit float WAV file."""
    rate, data = _wavfile.read(path)
    if data.ndim != 1:
        raise ValueError("only mono WAV files are supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    return Waveform(samples=samples, sample_rate=int(rate))


def save_spectrogram(path, s: ComplexSpectrogram) -> None:
    """Persist a spectrogram as an ``.npz`` container (shape/dtype header included)."""
    np.savez(path, values=s.values, window_size=s.window_size, hop=s.hop,
             sample_rate=s.sample_rate)


def load_spectrogram(path) -> ComplexSpectrogram:
    with np.load(path) as z:
        return ComplexSpectrogram(values=z["values"],
                                  window_size=int(z["window_size"]),
                                  hop=int(z["hop"]),
                                  sample_rate=int(z["sample_rate"]))


def save_tensor(path, arr: np.ndarray) -> None:
    """Persist an array in NumPy ``.npy`` format (self-describing header)."""
    np.save(path, np.asarray(arr))


def load_tensor(path) -> np.ndarray:
    return np.load(path)
