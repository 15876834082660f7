"""Two-stage separation training: mix-and-separate pairs, dominance-mask
targets, a weighted two-term cross-entropy objective, SGD with momentum, and
self-describing checkpoints.

The motion encoder arrives pre-trained from the embedding stage and stays
frozen unless explicitly unfrozen, so its per-scene token sequences are
computed once up front.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

from . import audio
from .ame import MotionEncoder, load_ame_checkpoint
from .appearance import AppearanceEncoder, SpectrogramEncoder
from .audio import MagGrid, Waveform, dominance_masks, ideal_binary_mask
from .config import SignalConfig
from .metrics import bss_eval
from .motion import AMTModule, SSRDecoder, SSREncoder, motion_stage_forward
from .scenes import NUM_CLASSES, read_dataset

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class TrainConfig:
    """Flat experiment configuration; serialized as ``key = value`` lines."""

    r1: float = 1.0
    r2: float = 1.0
    lr: float = 1e-3
    lr_pretrained_appearance: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    n_sources: int = 2
    seed: int = 0
    dataset: str = ""
    scale: float = 0.25
    ame_checkpoint: str = ""
    appearance_checkpoint: str = ""
    log_magnitude: bool = False
    val_fraction: float = 0.1
    pair_sampler: str = "uniform"
    unfreeze_motion: bool = False
    window_size: int = 510
    hop: int = 173
    grid_bins: int = 128
    grid_frames: int = 128
    margin: float = 2.0
    shift_min: float = 0.0   # 0 -> derive from clip duration
    shift_max: float = 0.0

    def __post_init__(self):
        if self.r1 < 0 or self.r2 < 0 or (self.r1 == 0 and self.r2 == 0):
            raise ValueError("loss weights must be non-negative and not both zero")
        for name in ("lr", "lr_pretrained_appearance", "scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.n_sources < 2:
            raise ValueError("n_sources must be >= 2")
        if self.pair_sampler not in ("uniform", "same-class"):
            raise ValueError(f"unknown pair_sampler {self.pair_sampler!r}")
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in (0, 0.5)")

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclass_fields(self)}


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def parse_config(path) -> TrainConfig:
    """Parse a flat ``key = value`` config file; unknown keys are rejected."""
    known = {f.name: f.type for f in dataclass_fields(TrainConfig)}
    defaults = TrainConfig.__dict__  # dataclass defaults live on the class
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, text = (part.strip() for part in line.partition("="))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            default = getattr(TrainConfig, key)
            try:
                if isinstance(default, bool):
                    values[key] = _BOOL_WORDS[text.lower()]
                elif isinstance(default, int):
                    values[key] = int(text)
                elif isinstance(default, float):
                    values[key] = float(text)
                else:
                    values[key] = text
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {text!r}") from e
    return TrainConfig(**values)


def write_config(path, config: TrainConfig) -> None:
    with open(path, "w") as fh:
        for name, value in config.echo().items():
            fh.write(f"{name} = {str(value).lower() if isinstance(value, bool) else value}\n")


# ---------------------------------------------------------------------------
# Targets and objective


def ground_truth_masks(component_grids) -> list:
    """Dominance masks, one per component grid."""
    return [ideal_binary_mask(component_grids, n) for n in range(len(component_grids))]


def amnet_loss(appearance_probs: torch.Tensor, motion_probs: torch.Tensor,
               targets: torch.Tensor, r1: float, r2: float,
               eps: float = PROB_EPS) -> torch.Tensor:
    """Sum over sources of r1*BCE(appearance) + r2*BCE(motion), cell means.

    Probabilities at exactly 0 or 1 are clamped to [eps, 1-eps] (logged) so
    the logs stay finite.
    """
    if appearance_probs.shape != targets.shape or motion_probs.shape != targets.shape:
        raise ValueError("stage probabilities and targets must share one shape")
    total = None
    for probs, weight in ((appearance_probs, r1), (motion_probs, r2)):
        if weight == 0.0:
            continue
        if bool((probs <= 0).any() or (probs >= 1).any()):
            logger.debug("clamping saturated probabilities by eps=%g", eps)
        p = probs.clamp(eps, 1.0 - eps)
        t = targets.to(p.dtype)
        bce = -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p))
        per_source = bce.mean(dim=tuple(range(2, bce.ndim))).sum(dim=1).mean()
        term = weight * per_source
        total = term if total is None else total + term
    return total


def copy_paste_baseline(x_mix: MagGrid, n_sources: int = 2) -> list[MagGrid]:
    """Trivial separator: every source estimate is the mixture itself."""
    return [MagGrid(x_mix.values.copy(), x_mix.warp, x_mix.time_start,
                    x_mix.source_frames) for _ in range(n_sources)]


# ---------------------------------------------------------------------------
# Model container


@dataclass
class AmnetModel:
    appearance: AppearanceEncoder
    mixture: SpectrogramEncoder
    ssr_encoder: SSREncoder
    ssr_decoder: SSRDecoder
    amt: AMTModule
    motion: MotionEncoder
    signal: SignalConfig
    width_scale: float
    num_classes: int
    log_magnitude: bool = False

    @property
    def input_gain(self) -> float:
        # keeps typical linear magnitudes O(1) for the convolutional stacks
        return 8.0 / self.signal.window_size

    def trainable_modules(self):
        return {"appearance": self.appearance, "mixture": self.mixture,
                "ssr_encoder": self.ssr_encoder, "ssr_decoder": self.ssr_decoder,
                "amt": self.amt}

    def all_modules(self):
        return {**self.trainable_modules(), "motion": self.motion}

    def train(self):
        for m in self.trainable_modules().values():
            m.train()
        self.motion.eval()
        return self

    def eval(self):
        for m in self.all_modules().values():
            m.eval()
        return self

    def scale_grid(self, grids: torch.Tensor) -> torch.Tensor:
        x = grids * self.input_gain
        return torch.log1p(x) if self.log_magnitude else x

    def motion_tokens(self, video: torch.Tensor) -> torch.Tensor:
        """[B, 3, T, H, W] -> [B, T', C] pooled motion feature tokens."""
        volume, _, _ = self.motion(video)
        return volume.mean(dim=(3, 4)).transpose(1, 2)

    def appearance_stage(self, keyframes: torch.Tensor, mix_grids: torch.Tensor):
        """keyframes [B, N, 3, H, W], mix_grids [B, 1, Hs, Ws].

        Returns (logits [B, N, 1, Hs, Ws], probs, hard masks, masked grids).
        """
        b, n = keyframes.shape[:2]
        vectors = self.appearance(keyframes.reshape(b * n, *keyframes.shape[2:]))
        vectors = vectors.reshape(b, n, -1)
        features = self.mixture(self.scale_grid(mix_grids))
        logits = torch.einsum("bnc,bchw->bnhw", vectors, features).unsqueeze(2)
        probs = torch.sigmoid(logits)
        masks = (probs > 0.5).to(logits.dtype)
        masked = masks * mix_grids.unsqueeze(1)
        return logits, probs, masks, masked

    def forward_pair(self, keyframes: torch.Tensor, mix_grids: torch.Tensor,
                     motion_tokens: torch.Tensor):
        """Full two-stage forward; returns a dict of per-stage tensors."""
        app_logits, app_probs, app_masks, app_masked = self.appearance_stage(
            keyframes, mix_grids)
        refined = motion_stage_forward(
            self.ssr_encoder, self.ssr_decoder, self.amt,
            app_logits, self.scale_grid(app_masked), motion_tokens)
        motion_probs = torch.sigmoid(refined)
        motion_masks = (motion_probs > 0.5).to(mix_grids.dtype)
        return {
            "appearance_logits": app_logits,
            "appearance_probs": app_probs,
            "appearance_masks": app_masks,
            "appearance_masked": app_masked,
            "motion_logits": refined,
            "motion_probs": motion_probs,
            "motion_masks": motion_masks,
        }


def build_amnet(signal: SignalConfig, width_scale: float, num_classes: int = NUM_CLASSES,
                motion: MotionEncoder | None = None,
                log_magnitude: bool = False) -> AmnetModel:
    ssr_encoder = SSREncoder(width_scale)
    return AmnetModel(
        appearance=AppearanceEncoder(num_classes, width_scale),
        mixture=SpectrogramEncoder(num_classes, width_scale),
        ssr_encoder=ssr_encoder,
        ssr_decoder=SSRDecoder(width_scale),
        amt=AMTModule(ssr_encoder.out_channels, heads=8, depth=1),
        motion=motion if motion is not None else MotionEncoder(width_scale),
        signal=signal,
        width_scale=width_scale,
        num_classes=num_classes,
        log_magnitude=log_magnitude,
    )


def save_amnet_checkpoint(path, model: AmnetModel, history=None, config_echo=None,
                          optimizer_state=None):
    payload = {
        "kind": "amnet",
        "width_scale": model.width_scale,
        "num_classes": model.num_classes,
        "log_magnitude": model.log_magnitude,
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
        "states": {name: m.state_dict() for name, m in model.all_modules().items()},
        "history": history or [],
        "config_echo": config_echo or {},
        "optimizer_state": optimizer_state,
    }
    torch.save(payload, path)


def load_amnet_checkpoint(path) -> tuple[AmnetModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "amnet":
        raise ValueError(f"{path} is not a two-stage separation checkpoint")
    signal = SignalConfig(**payload["signal"])
    model = build_amnet(signal, payload["width_scale"], payload["num_classes"],
                        log_magnitude=payload.get("log_magnitude", False))
    for name, module in model.all_modules().items():
        module.load_state_dict(payload["states"][name])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# Training data plumbing


class SceneTensorCache:
    """Per-scene tensors reused across epochs: frames, complex spectra,
    warped component grids, and (frozen) motion tokens."""

    def __init__(self, records, signal: SignalConfig, warp):
        self.records = records
        self.signal = signal
        self.warp = warp
        self.frames = []
        self.specs = []
        self.grids = []
        self.audio = []
        self.time_start = 0
        for rec in records:
            frames = rec.load_frames()
            wav = rec.load_audio()
            spec = audio.stft(wav, window_size=signal.window_size, hop=signal.hop)
            grid, t0 = audio.warp_array(np.abs(spec.values), warp, signal.grid_frames)
            self.time_start = t0
            self.frames.append(frames.values)
            self.specs.append(spec.values.astype(np.complex64))
            self.grids.append(grid.astype(np.float32))
            self.audio.append(wav.samples)
        self.spec_frames = self.specs[0].shape[1]
        self.motion_tokens = None

    def compute_motion_tokens(self, model: AmnetModel, batch: int = 8):
        model.motion.eval()
        tokens = []
        with torch.no_grad():
            for start in range(0, len(self.frames), batch):
                chunk = np.stack(self.frames[start:start + batch])
                tokens.append(model.motion_tokens(torch.from_numpy(chunk)))
        self.motion_tokens = torch.cat(tokens).numpy()

    def mixture_grid(self, idx: tuple[int, ...]) -> np.ndarray:
        total = np.zeros_like(self.specs[idx[0]], dtype=np.complex128)
        for i in idx:
            total += self.specs[i]
        grid, _ = audio.warp_array(np.abs(total), self.warp, self.signal.grid_frames)
        return grid.astype(np.float32)

    def target_masks(self, idx: tuple[int, ...]) -> np.ndarray:
        stack = np.stack([self.grids[i] for i in idx])
        return dominance_masks(stack).astype(np.float32)


def sample_pairs(n_scenes: int, count: int, rng: np.random.Generator,
                 n_sources: int = 2, classes=None, same_class: bool = False):
    """Draw mixture index tuples; optionally restricted to same-class groups."""
    pairs = []
    if same_class:
        if classes is None:
            raise ValueError("same-class sampling needs per-scene classes")
        by_class = {}
        for i, c in enumerate(classes):
            by_class.setdefault(c, []).append(i)
        eligible = [v for v in by_class.values() if len(v) >= n_sources]
        if not eligible:
            raise ValueError("no class has enough scenes for same-class mixtures")
        while len(pairs) < count:
            group = eligible[int(rng.integers(len(eligible)))]
            pairs.append(tuple(rng.choice(group, size=n_sources, replace=False).tolist()))
    else:
        while len(pairs) < count:
            pairs.append(tuple(rng.choice(n_scenes, size=n_sources, replace=False).tolist()))
    return pairs


# ---------------------------------------------------------------------------
# Training loop


def _signal_from_config(config: TrainConfig, manifest) -> SignalConfig:
    return SignalConfig(
        sample_rate=manifest.sample_rate,
        clip_seconds=manifest.duration,
        window_size=config.window_size,
        hop=config.hop,
        grid_bins=config.grid_bins,
        grid_frames=config.grid_frames,
        fps=manifest.fps,
        frames=manifest.num_frames,
        frame_size=manifest.frame_size,
    )


def train_amnet(config: TrainConfig, out_path=None, log=print):
    """Train the two-stage separator per the configuration.

    Returns (model, history). When ``out_path`` is given, the final
    checkpoint and an ``<out>_log.csv`` training curve are written; on
    divergence the last good checkpoint is kept and a RuntimeError raised.
    """
    records = read_dataset(config.dataset)
    torch.manual_seed(config.seed)
    signal = _signal_from_config(config, records[0].manifest)
    warp = audio.make_freq_warp(signal.freq_bins, signal.grid_bins)

    if config.ame_checkpoint:
        ame_model, _ = load_ame_checkpoint(config.ame_checkpoint)
        if abs(ame_model.width_scale - config.scale) > 1e-9:
            raise ValueError(
                f"embedding checkpoint width scale {ame_model.width_scale} does not "
                f"match configured scale {config.scale}")
        motion = ame_model.motion
    else:
        motion = None  # randomly initialized; mainly for smoke tests
    model = build_amnet(signal, config.scale, motion=motion,
                        log_magnitude=config.log_magnitude)
    if config.appearance_checkpoint:
        state = torch.load(config.appearance_checkpoint, map_location="cpu",
                           weights_only=True)
        model.appearance.load_state_dict(state)
        appearance_lr = config.lr_pretrained_appearance
    else:
        appearance_lr = config.lr

    groups = [{"params": list(model.appearance.parameters()), "lr": appearance_lr}]
    other = []
    for name, module in model.trainable_modules().items():
        if name != "appearance":
            other += list(module.parameters())
    groups.append({"params": other, "lr": config.lr})
    if config.unfreeze_motion:
        groups.append({"params": list(model.motion.parameters()), "lr": config.lr})
    else:
        for p in model.motion.parameters():
            p.requires_grad_(False)
    optimizer = torch.optim.SGD(groups, lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)

    cache = SceneTensorCache(records, signal, warp)
    cache.compute_motion_tokens(model)
    classes = [r.timbre_class for r in records]

    split_rng = np.random.default_rng(config.seed)
    order = split_rng.permutation(len(records))
    n_val = max(2, int(len(records) * config.val_fraction))
    val_idx, train_idx = order[:n_val].tolist(), order[n_val:].tolist()
    val_pairs = sample_pairs(len(val_idx), min(8, len(val_idx) // 2 or 1),
                             np.random.default_rng(config.seed + 1),
                             config.n_sources)
    val_pairs = [tuple(val_idx[i] for i in p) for p in val_pairs]

    def batch_tensors(mixtures, rng):
        n = config.n_sources
        mix_grids, keyframes, tokens, targets = [], [], [], []
        for idx in mixtures:
            mix_grids.append(cache.mixture_grid(idx))
            targets.append(cache.target_masks(idx))
            kf = []
            for i in idx:
                f = int(rng.integers(signal.frames))
                kf.append(cache.frames[i][:, f])
            keyframes.append(np.stack(kf))
            tokens.append(np.stack([cache.motion_tokens[i] for i in idx]))
        return (torch.from_numpy(np.stack(mix_grids)).unsqueeze(1),
                torch.from_numpy(np.stack(keyframes)),
                torch.from_numpy(np.stack(tokens)),
                torch.from_numpy(np.stack(targets)).unsqueeze(2))

    history = []
    last_good = None
    for epoch in range(config.epochs):
        rng = np.random.default_rng((config.seed + 1) * 1_000_000 + epoch)
        pairs = sample_pairs(len(train_idx), len(train_idx),
                             rng, config.n_sources, classes=[classes[i] for i in train_idx],
                             same_class=config.pair_sampler == "same-class")
        pairs = [tuple(train_idx[i] for i in p) for p in pairs]
        model.train()
        app_losses, motion_losses = [], []
        for start in range(0, len(pairs), config.batch_size):
            chunk = pairs[start:start + config.batch_size]
            if len(chunk) < 2:
                continue
            mix_grids, keyframes, tokens, targets = batch_tensors(chunk, rng)
            optimizer.zero_grad()
            out = model.forward_pair(keyframes, mix_grids, tokens)
            loss = amnet_loss(out["appearance_probs"], out["motion_probs"],
                              targets, config.r1, config.r2)
            if not torch.isfinite(loss):
                if out_path is not None and last_good is not None:
                    save_amnet_checkpoint(out_path, model, history, config.echo())
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                app_losses.append(float(amnet_loss(
                    out["appearance_probs"], out["motion_probs"], targets, 1.0, 0.0)))
                motion_losses.append(float(amnet_loss(
                    out["appearance_probs"], out["motion_probs"], targets, 0.0, 1.0)))
        val_sdr = validation_sdr(model, cache, val_pairs)
        row = {"epoch": epoch,
               "loss_appearance": float(np.mean(app_losses)),
               "loss_motion": float(np.mean(motion_losses)),
               "val_SDR": val_sdr}
        history.append(row)
        last_good = True
        log(f"[amnet] epoch {epoch}: app {row['loss_appearance']:.4f} "
            f"motion {row['loss_motion']:.4f} val SDR {val_sdr:.2f} dB")

    if out_path is not None:
        out_path = Path(out_path)
        save_amnet_checkpoint(out_path, model, history, config.echo())
        log_path = out_path.with_name(out_path.stem + "_log.csv")
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss_appearance",
                                                    "loss_motion", "val_SDR"])
            writer.writeheader()
            writer.writerows(history)
    return model, history


def validation_sdr(model: AmnetModel, cache: SceneTensorCache, pairs) -> float:
    """Mean SDR of the full model over validation mixtures."""
    model.eval()
    signal = model.signal
    scores = []
    with torch.no_grad():
        for idx in pairs:
            mix_grids = torch.from_numpy(cache.mixture_grid(idx)).reshape(
                1, 1, signal.grid_bins, signal.grid_frames)
            center = signal.frames // 2
            keyframes = torch.from_numpy(np.stack(
                [cache.frames[i][:, center] for i in idx])).unsqueeze(0)
            tokens = torch.from_numpy(np.stack(
                [cache.motion_tokens[i] for i in idx])).unsqueeze(0)
            out = model.forward_pair(keyframes, mix_grids, tokens)
            masks = out["motion_masks"][0, :, 0].cpu().numpy()
            mix_spec_values = np.zeros_like(cache.specs[idx[0]], dtype=np.complex128)
            for i in idx:
                mix_spec_values += cache.specs[i]
            mix_spec = audio.ComplexSpectrogram(
                mix_spec_values, signal.window_size, signal.hop, signal.sample_rate)
            refs = [Waveform(cache.audio[i], signal.sample_rate) for i in idx]
            length = len(cache.audio[idx[0]])
            for n in range(len(idx)):
                mask = audio.BinaryMask(masks[n].astype(np.float64), cache.warp,
                                        time_start=cache.time_start,
                                        source_frames=mix_spec.frames)
                full = audio.unwarp_mask(mask, mix_spec)
                est = audio.istft(audio.apply_mask(full, mix_spec), length)
                scores.append(bss_eval(est, refs, n).sdr)
    return float(np.mean(scores))


def train_ame_from_config(config: TrainConfig, log=print):
    """Drive embedding training from the shared flat configuration."""
    from .ame import train_ame

    records = read_dataset(config.dataset)
    signal = _signal_from_config(config, records[0].manifest)
    shift_range = None
    if config.shift_min > 0 and config.shift_max > config.shift_min:
        shift_range = (config.shift_min, config.shift_max)
    return train_ame(
        records, epochs=config.epochs, lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay, batch_size=config.batch_size,
        seed=config.seed, val_fraction=config.val_fraction, margin=config.margin,
        width_scale=config.scale, signal=signal, shift_range=shift_range, log=log)
