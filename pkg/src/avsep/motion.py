"""Motion-driven refinement stage.

An encoder-decoder refiner squeezes the appearance-stage spectrogram to a
token grid, a cross-modal transformer injects motion evidence (queries from
sound tokens, keys/values from motion tokens), and the decoder emits a
residual spectrum that is relocated between source pairs: subtracted from
the source it does not belong to and added to the one it does. The pairwise
sum of mask logits is conserved exactly.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import BinaryMask, MagGrid, apply_mask


def _width(base: int, scale: float) -> int:
    return max(8, int(round(base * scale)))


# ---------------------------------------------------------------------------
# Spectrogram refiner (encoder / decoder)


class SSREncoder(nn.Module):
    """7 down-convolutions (4 strided, 3 at full rate) to a /16 token grid."""

    def __init__(self, width_scale: float = 0.25):
        super().__init__()
        w = [_width(c, width_scale) for c in (64, 128, 256, 512)]
        self.out_channels = w[3]
        chans = [1, w[0], w[1], w[2], w[3], w[3], w[3], w[3]]
        strides = [2, 2, 2, 2, 1, 1, 1]
        layers = []
        for i, s in enumerate(strides):
            if s == 2:
                layers.append(nn.Conv2d(chans[i], chans[i + 1], 4, stride=2,
                                        padding=1, bias=False))
            else:
                layers.append(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, bias=False))
            layers.append(nn.BatchNorm2d(chans[i + 1]))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        self.net = nn.Sequential(*layers)

    def forward(self, grid):
        """grid: [B, 1, H, W] -> [B, C, H/16, W/16]."""
        _, _, h, w = grid.shape
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"grid size {h}x{w} not divisible by 16")
        return self.net(grid)


class SSRDecoder(nn.Module):
    """7 up-convolutions (3 at full rate, 4 strided) back to a 1-channel map.

    The last layer has no normalization or activation: the output lives in
    the real-valued residual-logit domain.
    """

    def __init__(self, width_scale: float = 0.25):
        super().__init__()
        w = [_width(c, width_scale) for c in (64, 128, 256, 512)]
        body = []
        for _ in range(3):
            body.append(nn.Conv2d(w[3], w[3], 3, padding=1, bias=False))
            body.append(nn.BatchNorm2d(w[3]))
            body.append(nn.LeakyReLU(0.2, inplace=True))
        for cin, cout in ((w[3], w[2]), (w[2], w[1]), (w[1], w[0])):
            body.append(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False))
            body.append(nn.BatchNorm2d(cout))
            body.append(nn.LeakyReLU(0.2, inplace=True))
        self.body = nn.Sequential(*body)
        self.final = nn.ConvTranspose2d(w[0], 1, 4, stride=2, padding=1)

    def forward(self, tokens):
        """tokens: [B, C, h, w] -> [B, 1, 16h, 16w] residual logits."""
        return self.final(self.body(tokens))


# ---------------------------------------------------------------------------
# Audio-motion transformer


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with explicit per-head weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value):
        """[B, Lq, D], [B, Lk, D], [B, Lk, D] -> ([B, Lq, D], [B, h, Lq, Lk])."""
        b, lq, _ = query.shape
        lk = key.shape[1]
        q = self.q_proj(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, self.dim)
        return self.out_proj(out), attn


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, mult * dim), nn.ReLU(inplace=True), nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic fixed sine/cosine position table, shape [length, dim]."""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64)
                    * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: (dim + 1) // 2])
    return table.to(dtype)


class AMTEncoderLayer(nn.Module):
    def __init__(self, dim, heads, ff_mult=4):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        y, attn = self.attn(x, x, x)
        x = self.norm1(x + y)
        x = self.norm2(x + self.ff(x))
        return x, attn


class AMTDecoderLayer(nn.Module):
    def __init__(self, dim, heads, ff_mult=4):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, sound, motion):
        y, self_w = self.self_attn(sound, sound, sound)
        sound = self.norm1(sound + y)
        y, cross_w = self.cross_attn(sound, motion, motion)
        sound = self.norm2(sound + y)
        sound = self.norm3(sound + self.ff(sound))
        return sound, self_w, cross_w


class AMTModule(nn.Module):
    """Cross-modal fusion: motion tokens encode themselves, sound tokens
    self-attend and then query the encoded motion sequence.

    The sound volume is flattened row-major into (h*w) tokens; both token
    streams receive sinusoidal positional encodings unless disabled.
    """

    def __init__(self, dim: int, heads: int = 8, depth: int = 1, ff_mult: int = 4,
                 use_positional: bool = True):
        super().__init__()
        self.dim = dim
        self.use_positional = use_positional
        self.encoder = nn.ModuleList(AMTEncoderLayer(dim, heads, ff_mult) for _ in range(depth))
        self.decoder = nn.ModuleList(AMTDecoderLayer(dim, heads, ff_mult) for _ in range(depth))

    def forward(self, motion_tokens, sound_volume, return_attention: bool = False):
        """motion_tokens: [B, Tm, D]; sound_volume: [B, D, h, w].

        Returns the fused volume [B, D, h, w] (plus attention maps when
        requested).
        """
        if motion_tokens.shape[2] != self.dim:
            raise ValueError(
                f"motion token width {motion_tokens.shape[2]} != module width {self.dim}")
        if sound_volume.shape[1] != self.dim:
            raise ValueError(
                f"sound channel width {sound_volume.shape[1]} != module width {self.dim}")
        b, d, h, w = sound_volume.shape
        sound = sound_volume.flatten(2).transpose(1, 2)  # [B, h*w, D]
        if self.use_positional:
            motion_tokens = motion_tokens + sinusoidal_positions(
                motion_tokens.shape[1], d, motion_tokens.dtype).to(motion_tokens.device)
            sound = sound + sinusoidal_positions(sound.shape[1], d, sound.dtype).to(sound.device)
        attn_maps = {"encoder": [], "decoder_self": [], "decoder_cross": []}
        x = motion_tokens
        for layer in self.encoder:
            x, attn = layer(x)
            attn_maps["encoder"].append(attn)
        s = sound
        for layer in self.decoder:
            s, self_w, cross_w = layer(s, x)
            attn_maps["decoder_self"].append(self_w)
            attn_maps["decoder_cross"].append(cross_w)
        fused = s.transpose(1, 2).reshape(b, d, h, w)
        if return_attention:
            return fused, attn_maps
        return fused


# ---------------------------------------------------------------------------
# Residual relocation


def fold_residual_pair(logits_n: torch.Tensor, logits_m: torch.Tensor,
                       residual: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Move `residual` from source n to source m in the logit domain.

    Arithmetic runs in float64 so that, for float32 inputs, the pairwise sum
    is conserved bit-exactly: (a - r) + (b + r) == a + b.
    """
    a = logits_n.double()
    b = logits_m.double()
    r = residual.double()
    return a - r, b + r


def relocate_residuals(app_logits: torch.Tensor, residuals: dict) -> torch.Tensor:
    """Fold directional residuals into per-source refined logits.

    ``app_logits`` is [B, N, 1, H, W]; ``residuals[(n, m)]`` is the
    [B, 1, H, W] component that belongs to m but is currently assigned to n.
    Each source receives its incoming residuals and sheds its outgoing ones,
    so the sum over sources is conserved.
    """
    n_sources = app_logits.shape[1]
    if n_sources == 2:
        net = residuals[(0, 1)].double() - residuals[(1, 0)].double()
        f0, f1 = fold_residual_pair(app_logits[:, 0], app_logits[:, 1], net)
        return torch.stack([f0, f1], dim=1)
    out = []
    for n in range(n_sources):
        total = app_logits[:, n].double()
        for m in range(n_sources):
            if m == n:
                continue
            total = total + residuals[(m, n)].double() - residuals[(n, m)].double()
        out.append(total)
    return torch.stack(out, dim=1)


def residual_fuse(app_logits_n: np.ndarray, app_logits_m: np.ndarray,
                  residual: np.ndarray, x_mix: MagGrid):
    """Functional pairwise relocation (numpy in, numpy/value types out).

    Returns (masked grid n, masked grid m, mask n, mask m).
    """
    shapes = {np.shape(app_logits_n), np.shape(app_logits_m), np.shape(residual)}
    if len(shapes) != 1 or shapes.pop() != x_mix.values.shape:
        raise ValueError("logit maps and residual must match the mixture grid shape")
    f_n, f_m = fold_residual_pair(
        torch.from_numpy(np.asarray(app_logits_n, dtype=np.float32)),
        torch.from_numpy(np.asarray(app_logits_m, dtype=np.float32)),
        torch.from_numpy(np.asarray(residual, dtype=np.float32)))
    masks = []
    outs = []
    for f in (f_n, f_m):
        probs = torch.sigmoid(f).numpy()
        mask = BinaryMask.like(x_mix, (probs > 0.5).astype(np.float64))
        masks.append(mask)
        outs.append(apply_mask(mask, x_mix))
    return outs[0], outs[1], masks[0], masks[1]


def motion_stage_forward(ssr_encoder: SSREncoder, ssr_decoder: SSRDecoder,
                         amt: AMTModule, app_logits: torch.Tensor,
                         app_masked_grids: torch.Tensor,
                         motion_tokens: torch.Tensor) -> torch.Tensor:
    """Run the full refinement for every ordered source pair.

    app_logits:       [B, N, 1, H, W] appearance-stage mask logits
    app_masked_grids: [B, N, 1, H, W] appearance-stage masked magnitudes
    motion_tokens:    [B, N, T', D] pooled motion features per source

    Returns refined per-source logits [B, N, 1, H, W] (float64).
    """
    b, n_sources = app_logits.shape[:2]
    if n_sources < 2:
        raise ValueError("refinement needs at least 2 sources")
    flat = app_masked_grids.reshape(b * n_sources, *app_masked_grids.shape[2:])
    encoded = ssr_encoder(flat)
    encoded = encoded.reshape(b, n_sources, *encoded.shape[1:])
    residuals = {}
    for n in range(n_sources):
        for m in range(n_sources):
            if m == n:
                continue
            fused = amt(motion_tokens[:, m], encoded[:, n])
            residuals[(n, m)] = ssr_decoder(fused)
    return relocate_residuals(app_logits, residuals)
