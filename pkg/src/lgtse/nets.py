"""Desk-scale denoiser (GTCRN-style) and mask-estimation backbone (simplified SEF-PNet).

Layout conventions: spectra are ``(B, 2F, T)`` with real rows above
imaginary rows; 2-D feature maps are ``(B, C, F, T)``. Every temporal
convolution is causal, so appending frames never changes earlier outputs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import ComplexSpec, ErbFilterbank, complex_mul
from .errors import ConfigError, IngestError, ShapeError
from .guidance import Layout, StackedInput

CHECKPOINT_VERSION = 1


@dataclass
class DenoiserConfig:
    erb_bands: int = 64
    encoder_channels: tuple[int, ...] = (16, 16)
    gt_blocks: int = 3
    gt_dilations: tuple[int, ...] = (1, 2, 5)
    dprnn_hidden: int = 32
    dprnn_groups: int = 2
    dprnn_layers: int = 1
    n_freq: int = 129
    sample_rate: int = 8000

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.gt_dilations = tuple(self.gt_dilations)
        if self.gt_blocks < 1:
            raise ConfigError("gt_blocks must be >= 1")
        if len(self.encoder_channels) != 2 or min(self.encoder_channels) < 1:
            raise ConfigError("encoder_channels must hold two positive widths")
        c1, c = self.encoder_channels
        if c1 % 2 or c % 2 or c % self.dprnn_groups or self.dprnn_hidden % (2 * self.dprnn_groups):
            raise ConfigError("channel/hidden widths must split evenly across groups and directions")


@dataclass
class BackboneConfig:
    in_channels: int = 4
    encoder_channels: int = 16
    tcn_hidden: int = 64
    tcn_blocks: int = 8
    tcn_dilations: tuple[int, ...] = (1, 2, 4, 8)
    tcn_kernel: int = 3
    pyramid_levels: int = 3
    n_freq: int = 129

    def __post_init__(self):
        self.tcn_dilations = tuple(self.tcn_dilations)
        if self.in_channels not in (4, 6):
            raise ConfigError("in_channels must be 4 (base_concat) or 6 (distortion_concat)")
        if any(d < 1 for d in self.tcn_dilations) or list(self.tcn_dilations) != sorted(self.tcn_dilations):
            raise ConfigError("TCN dilations must be positive and increasing")

    @property
    def layout(self) -> Layout:
        return Layout.BASE if self.in_channels == 4 else Layout.DISTORTION


# --------------------------------------------------------------------------
# shared pieces


def _freq_out(n: int, k: int = 3, s: int = 2, p: int = 1) -> int:
    return (n + 2 * p - k) // s + 1


class ChannelNorm(nn.Module):
    """LayerNorm over channels at every (freq, time) position; causal-safe."""

    def __init__(self, channels: int):
        super().__init__()
        self.ln = nn.LayerNorm(channels, eps=1e-8)

    def forward(self, x):
        return self.ln(x.movedim(1, -1)).movedim(-1, 1)


class CausalConv2d(nn.Module):
    """Conv over (freq, time) with left-only time padding."""

    def __init__(self, cin, cout, kernel=(3, 3), stride=(1, 1), dilation=1, groups=1, freq_pad=None):
        super().__init__()
        kf, kt = kernel
        self.time_pad = (kt - 1) * dilation
        fp = (kf - 1) // 2 if freq_pad is None else freq_pad
        self.conv = nn.Conv2d(cin, cout, kernel, stride, padding=(fp, 0), dilation=(1, dilation), groups=groups)

    def forward(self, x):
        return self.conv(F.pad(x, (self.time_pad, 0)))


class ComplexMask(nn.Module):
    def forward(self, mask, spec):
        return complex_mul(mask, spec)


# --------------------------------------------------------------------------
# denoiser


class GTConvBlock(nn.Module):
    """Grouped causal temporal convolution with a gated linear unit and a residual path."""

    def __init__(self, channels: int, dilation: int, groups: int = 2):
        super().__init__()
        self.expand = nn.Conv2d(channels, 2 * channels, 1)
        self.temporal = CausalConv2d(2 * channels, 2 * channels, (3, 3), dilation=dilation, groups=groups)
        self.project = nn.Conv2d(channels, channels, 1)
        self.norm = ChannelNorm(channels)
        self.act = nn.PReLU()

    def forward(self, x):
        h = self.temporal(self.expand(x))
        h = F.glu(h, dim=1)
        return x + self.act(self.norm(self.project(h)))


class GroupedGRU(nn.Module):
    def __init__(self, input_size, hidden_size, groups, bidirectional):
        super().__init__()
        d = 2 if bidirectional else 1
        self.groups = groups
        self.rnns = nn.ModuleList(
            nn.GRU(input_size // groups, hidden_size // (groups * d), batch_first=True, bidirectional=bidirectional)
            for _ in range(groups)
        )

    def forward(self, x):
        chunks = torch.chunk(x, self.groups, dim=-1)
        return torch.cat([rnn(c)[0] for rnn, c in zip(self.rnns, chunks)], dim=-1)


class DualPathGRU(nn.Module):
    """Intra-band (bidirectional, across bands) then inter-frame (causal, across time) grouped GRUs."""

    def __init__(self, channels, hidden, groups):
        super().__init__()
        self.intra = GroupedGRU(channels, hidden, groups, bidirectional=True)
        self.intra_fc = nn.Linear(hidden, channels)
        self.intra_ln = nn.LayerNorm(channels, eps=1e-8)
        self.inter = GroupedGRU(channels, hidden, groups, bidirectional=False)
        self.inter_fc = nn.Linear(hidden, channels)
        self.inter_ln = nn.LayerNorm(channels, eps=1e-8)

    def forward(self, x):
        B, C, Fb, T = x.shape
        h = x.permute(0, 3, 2, 1).reshape(B * T, Fb, C)
        h = h + self.intra_ln(self.intra_fc(self.intra(h)))
        h = h.reshape(B, T, Fb, C).transpose(1, 2).reshape(B * Fb, T, C)
        h = h + self.inter_ln(self.inter_fc(self.inter(h)))
        return h.reshape(B, Fb, T, C).permute(0, 3, 1, 2)


class Denoiser(nn.Module):
    """Compressed noisy spectrum in, compressed enhanced spectrum out (complex ratio mask)."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        fb = ErbFilterbank(cfg.n_freq, cfg.erb_bands, cfg.sample_rate)
        self.register_buffer("erb_fwd", fb.weights.float(), persistent=False)
        self.register_buffer("erb_inv", fb.inverse.float(), persistent=False)
        c1, c2 = cfg.encoder_channels
        self.bands = [cfg.erb_bands, _freq_out(cfg.erb_bands, 5, 2, 2)]
        self.bands.append(_freq_out(self.bands[1], 5, 2, 2))

        self.enc1 = nn.Sequential(nn.Conv2d(3, c1, (5, 1), (2, 1), (2, 0)), ChannelNorm(c1), nn.PReLU())
        self.enc2 = nn.Sequential(nn.Conv2d(c1, c2, (5, 1), (2, 1), (2, 0), groups=2), ChannelNorm(c2), nn.PReLU())
        dil = [cfg.gt_dilations[i % len(cfg.gt_dilations)] for i in range(cfg.gt_blocks)]
        self.enc_gt = nn.ModuleList(GTConvBlock(c2, d) for d in dil)
        self.dprnn = nn.Sequential(*(DualPathGRU(c2, cfg.dprnn_hidden, cfg.dprnn_groups) for _ in range(cfg.dprnn_layers)))
        self.dec_gt = nn.ModuleList(GTConvBlock(c2, d) for d in reversed(dil))
        self.dec2 = nn.ConvTranspose2d(c2, c1, (5, 1), (2, 1), (2, 0), groups=2)
        self.dec2_post = nn.Sequential(ChannelNorm(c1), nn.PReLU())
        self.dec1 = nn.ConvTranspose2d(c1, 2, (5, 1), (2, 1), (2, 0))
        self.mask = ComplexMask()

    def forward(self, Y: torch.Tensor) -> torch.Tensor:
        """(B, 2F, T) compressed spectrum -> same shape."""
        Fq = self.cfg.n_freq
        if Y.shape[-2] != 2 * Fq:
            raise ShapeError(f"denoiser expects {2 * Fq} rows, got {Y.shape[-2]}")
        re, im = Y[:, :Fq], Y[:, Fq:]
        mag = torch.sqrt(re**2 + im**2 + 1e-12)
        feats = torch.stack([mag, re, im], dim=1)  # (B,3,F,T)
        x = torch.matmul(self.erb_fwd.to(Y.dtype), feats)  # (B,3,Fb,T)

        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        skips = []
        h = e2
        for blk in self.enc_gt:
            h = blk(h)
            skips.append(h)
        h = self.dprnn(h)
        for blk, s in zip(self.dec_gt, reversed(skips)):
            h = blk(h + s)
        h = self.dec2_post(self.dec2(h + e2, output_size=e1.shape[-2:]))
        m = self.dec1(h + e1, output_size=x.shape[-2:])  # (B,2,Fb,T)
        m = torch.matmul(self.erb_inv.to(Y.dtype), m)  # (B,2,F,T)
        # non-negative real part: a scale-invariant loss cannot drive the
        # output to the sign-inverted solution, which would corrupt guidance
        m = torch.cat([torch.sigmoid(m[:, :1]), torch.tanh(m[:, 1:])], dim=1)
        return self.mask(m.flatten(1, 2), Y)


class IdentityDenoiser(nn.Module):
    def forward(self, Y):
        return Y


# --------------------------------------------------------------------------
# backbone


class PyramidBlock(nn.Module):
    """Average-pool the frequency axis at several scales, project, upsample, sum."""

    def __init__(self, channels: int, levels: int):
        super().__init__()
        self.scales = [2**i for i in range(levels)]
        self.proj = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in self.scales)
        self.norm = ChannelNorm(channels)
        self.act = nn.PReLU()

    def forward(self, x):
        Fq = x.shape[-2]
        out = 0
        for s, proj in zip(self.scales, self.proj):
            h = F.avg_pool2d(x, (s, 1), (s, 1), ceil_mode=True) if s > 1 else x
            h = proj(h)
            if s > 1:
                h = F.interpolate(h, size=(Fq, x.shape[-1]), mode="nearest")
            out = out + h
        return x + self.act(self.norm(out))


class TCNBlock(nn.Module):
    def __init__(self, hidden: int, dilation: int, kernel: int):
        super().__init__()
        inner = 2 * hidden
        self.pad = (kernel - 1) * dilation
        self.inp = nn.Conv1d(hidden, inner, 1)
        self.act1 = nn.PReLU()
        self.norm1 = nn.LayerNorm(inner, eps=1e-8)
        self.depth = nn.Conv1d(inner, inner, kernel, dilation=dilation, groups=inner)
        self.act2 = nn.PReLU()
        self.norm2 = nn.LayerNorm(inner, eps=1e-8)
        self.out = nn.Conv1d(inner, hidden, 1)

    @staticmethod
    def _ln(ln, x):
        return ln(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, x):
        h = self._ln(self.norm1, self.act1(self.inp(x)))
        h = self.depth(F.pad(h, (self.pad, 0)))
        h = self._ln(self.norm2, self.act2(h))
        return x + self.out(h)


class Backbone(nn.Module):
    """Encoder -> pyramid -> TCN -> transposed-conv decoder -> bounded complex mask."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BackboneConfig()
        c = cfg.encoder_channels
        self.f1 = _freq_out(cfg.n_freq)
        self.f2 = _freq_out(self.f1)
        self.enc1 = nn.Sequential(CausalConv2d(cfg.in_channels, c, (3, 3), (2, 1)), ChannelNorm(c), nn.PReLU())
        self.enc2 = nn.Sequential(CausalConv2d(c, c, (3, 3), (2, 1)), ChannelNorm(c), nn.PReLU())
        self.pyramid = PyramidBlock(c, cfg.pyramid_levels)
        width = c * self.f2
        self.tcn_in = nn.Conv1d(width, cfg.tcn_hidden, 1)
        dil = [cfg.tcn_dilations[i % len(cfg.tcn_dilations)] for i in range(cfg.tcn_blocks)]
        self.tcn = nn.Sequential(*(TCNBlock(cfg.tcn_hidden, d, cfg.tcn_kernel) for d in dil))
        self.tcn_out = nn.Conv1d(cfg.tcn_hidden, width, 1)
        self.dec2 = nn.ConvTranspose2d(2 * c, c, (3, 1), (2, 1), (1, 0))
        self.dec2_post = nn.Sequential(ChannelNorm(c), nn.PReLU())
        self.dec1 = nn.ConvTranspose2d(2 * c, c, (3, 1), (2, 1), (1, 0))
        self.dec1_post = nn.PReLU()
        self.head = nn.Conv2d(c, 2, 1)

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        """(B, C_in, F, T) stacked input -> (B, 2F, T) complex mask."""
        cfg = self.cfg
        if X.shape[1] != cfg.in_channels or X.shape[2] != cfg.n_freq:
            raise ShapeError(f"backbone expects (B, {cfg.in_channels}, {cfg.n_freq}, T), got {tuple(X.shape)}")
        e1 = self.enc1(X)
        e2 = self.enc2(e1)
        h = self.pyramid(e2)
        B, C, Fq, T = h.shape
        z = self.tcn_out(self.tcn(self.tcn_in(h.reshape(B, C * Fq, T))))
        h = h + z.reshape(B, C, Fq, T)
        h = self.dec2_post(self.dec2(torch.cat([h, e2], 1), output_size=e1.shape[-2:]))
        h = self.dec1_post(self.dec1(torch.cat([h, e1], 1), output_size=X.shape[-2:]))
        m = torch.tanh(self.head(h))
        return m.flatten(1, 2)


# --------------------------------------------------------------------------
# spec-level wrappers


def _batched(t: torch.Tensor, nd: int):
    return (t.unsqueeze(0), True) if t.ndim == nd else (t, False)


def denoiser_forward(Y: ComplexSpec, model: nn.Module) -> ComplexSpec:
    x, single = _batched(Y.data, 2)
    out = model(x)
    if out.shape != x.shape:
        raise ShapeError(f"denoiser output {tuple(out.shape)} != input {tuple(x.shape)}")
    return Y.with_data(out[0] if single else out)


def backbone_forward(X: StackedInput, model: Backbone) -> torch.Tensor:
    if X.layout is not model.cfg.layout:
        raise ShapeError(f"input layout {X.layout.value} does not match backbone ({model.cfg.layout.value})")
    x, single = _batched(X.data, 3)
    m = model(x)
    return m[0] if single else m


def apply_mask(mask: torch.Tensor, X: StackedInput | torch.Tensor) -> torch.Tensor:
    """Complex-multiply the mask against channels 0-1 of the stacked input."""
    data = X.data if isinstance(X, StackedInput) else X
    spec = torch.cat([data[..., 0, :, :], data[..., 1, :, :]], dim=-2)
    return complex_mul(mask, spec)


# --------------------------------------------------------------------------
# parameter accounting and checkpoints


@dataclass
class ParamReport:
    per_module: dict[str, int] = field(default_factory=dict)
    per_tensor: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_tensor.values())

    def millions(self) -> float:
        return self.total / 1e6


def count_params(model: nn.Module) -> ParamReport:
    per_tensor = {name: p.numel() for name, p in model.named_parameters()}
    per_module: dict[str, int] = {}
    for name, n in per_tensor.items():
        top = name.split(".", 1)[0] if "." in name else "<root>"
        per_module[top] = per_module.get(top, 0) + n
    return ParamReport(per_module, per_tensor)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": CHECKPOINT_VERSION, **payload}, path)
    return path


def load_checkpoint(path, expect: dict | None = None) -> dict:
    """Load a checkpoint; ``expect`` maps config keys to configs that must match the stored echo."""
    try:
        ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise IngestError(path, str(exc)) from exc
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {ckpt.get('version')}")
    for key, cfg in (expect or {}).items():
        stored = ckpt.get("configs", {}).get(key)
        want = asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else cfg
        if stored is not None and json.loads(json.dumps(stored)) != json.loads(json.dumps(want)):
            raise ConfigError(f"checkpoint {key} config does not match: {stored} vs {want}")
    return ckpt
