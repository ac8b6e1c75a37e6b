"""Signal transforms: STFT/iSTFT, power-law magnitude compression, ERB banding, WAV I/O.

Spectra are stored as real tensors with real parts stacked above imaginary
parts along the frequency axis, i.e. shape ``(..., 2F, T)``.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .errors import IngestError, InvalidInput, InvalidState, ShapeError

DEFAULT_SAMPLE_RATE = 8000
# floor for squared magnitudes so power laws stay differentiable at the origin
_TINY = 1e-30


@dataclass
class Waveform:
    samples: torch.Tensor
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not isinstance(self.samples, torch.Tensor):
            self.samples = torch.as_tensor(np.asarray(self.samples))
        if self.samples.ndim == 0 or self.samples.shape[-1] < 1:
            raise InvalidInput("waveform must contain at least one sample")
        if not torch.isfinite(self.samples).all():
            raise InvalidInput("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def numpy(self) -> np.ndarray:
        return self.samples.detach().cpu().numpy()


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_ms: float = 32.0
    hop_ms: float = 8.0

    def __post_init__(self):
        if self.win_length % self.hop != 0:
            raise InvalidInput("hop must divide the window length")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def n_fft(self) -> int:
        return self.win_length

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop

    def window(self, dtype=torch.float32) -> torch.Tensor:
        return torch.hann_window(self.win_length, periodic=True, dtype=dtype)


@dataclass
class ComplexSpec:
    data: torch.Tensor
    config: StftConfig = field(default_factory=StftConfig)
    compressed: bool = False
    length: int | None = None  # source waveform length, used by istft

    def __post_init__(self):
        F = self.config.n_freq
        if self.data.ndim < 2 or self.data.shape[-2] != 2 * F:
            raise ShapeError(f"expected (..., {2 * F}, T), got {tuple(self.data.shape)}")
        if self.data.shape[-1] < 1:
            raise ShapeError("spectrum has no frames")
        if not torch.isfinite(self.data).all():
            raise InvalidInput("spectrum contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]

    @property
    def real(self) -> torch.Tensor:
        return self.data[..., : self.config.n_freq, :]

    @property
    def imag(self) -> torch.Tensor:
        return self.data[..., self.config.n_freq :, :]

    @property
    def magnitude(self) -> torch.Tensor:
        return torch.sqrt(self.real**2 + self.imag**2)

    @property
    def phase(self) -> torch.Tensor:
        """Per-bin phase; zero-magnitude bins are pinned to 0."""
        ph = torch.atan2(self.imag, self.real)
        return torch.where(self.magnitude > 0, ph, torch.zeros_like(ph))

    def complex(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)

    def with_data(self, data: torch.Tensor) -> "ComplexSpec":
        return replace(self, data=data)


@dataclass(frozen=True)
class DrcConfig:
    beta: float = 0.5

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise InvalidInput(f"beta must lie in (0, 1], got {self.beta}")


# --------------------------------------------------------------------------
# tensor-level kernels (no validation; used inside training graphs)


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    lead = x.shape[:-1]
    X = torch.stft(
        x.reshape(-1, x.shape[-1]),
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.win_length,
        window=cfg.window(x.dtype),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    out = torch.cat([X.real, X.imag], dim=-2)
    return out.reshape(*lead, *out.shape[-2:])


def istft_tensor(S: torch.Tensor, cfg: StftConfig, length: int | None = None) -> torch.Tensor:
    F = cfg.n_freq
    lead = S.shape[:-2]
    S = S.reshape(-1, *S.shape[-2:])
    X = torch.complex(S[:, :F], S[:, F:])
    x = torch.istft(
        X,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.win_length,
        window=cfg.window(S.dtype),
        center=True,
        length=length,
    )
    return x.reshape(*lead, x.shape[-1])


def power_law(S: torch.Tensor, exponent: float) -> torch.Tensor:
    """Raise per-bin magnitude to ``exponent`` keeping the phase (scales re and im alike)."""
    F = S.shape[-2] // 2
    re, im = S[..., :F, :], S[..., F:, :]
    mag2 = (re**2 + im**2).clamp_min(_TINY)
    gain = mag2 ** ((exponent - 1.0) / 2)
    return S * torch.cat([gain, gain], dim=-2)


def complex_mul(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Complex product of two stacked (re over im) spectra."""
    F = A.shape[-2] // 2
    ar, ai = A[..., :F, :], A[..., F:, :]
    br, bi = B[..., :F, :], B[..., F:, :]
    return torch.cat([ar * br - ai * bi, ar * bi + ai * br], dim=-2)


# --------------------------------------------------------------------------
# public operations


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpec:
    cfg = cfg or StftConfig(sample_rate=w.sample_rate)
    if w.sample_rate != cfg.sample_rate:
        raise InvalidInput(f"sample rate {w.sample_rate} != config rate {cfg.sample_rate}")
    if len(w) < cfg.win_length:
        raise InvalidInput(f"waveform of {len(w)} samples is shorter than one window ({cfg.win_length})")
    return ComplexSpec(stft_tensor(w.samples, cfg), cfg, compressed=False, length=len(w))


def istft(s: ComplexSpec, length: int | None = None) -> Waveform:
    if s.compressed:
        raise InvalidState("istft needs an expanded spectrum; call drc_expand first")
    length = length if length is not None else s.length
    return Waveform(istft_tensor(s.data, s.config, length), s.config.sample_rate)


def drc_compress(s: ComplexSpec, cfg: DrcConfig | None = None) -> ComplexSpec:
    cfg = cfg or DrcConfig()
    if s.compressed:
        raise InvalidState("spectrum is already compressed")
    return replace(s, data=power_law(s.data, cfg.beta), compressed=True)


def drc_expand(s: ComplexSpec, cfg: DrcConfig | None = None) -> ComplexSpec:
    cfg = cfg or DrcConfig()
    if not s.compressed:
        raise InvalidState("spectrum is not compressed")
    return replace(s, data=power_law(s.data, 1.0 / cfg.beta), compressed=False)


# --------------------------------------------------------------------------
# ERB banding


def hz_to_erb(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_centers(n_freq: int, bands: int, sample_rate: int) -> np.ndarray:
    """Band centres in (fractional) bin units.

    Low bands sit one bin apart until ERB spacing becomes wider than a bin,
    so every band covers at least one bin.
    """
    nyq = sample_rate / 2
    bin_hz = nyq / (n_freq - 1)
    for n_lin in range(bands):
        lo = n_lin * bin_hz
        erb = np.linspace(hz_to_erb(lo), hz_to_erb(nyq), bands - n_lin)
        upper = erb_to_hz(erb) / bin_hz
        centers = np.concatenate([np.arange(n_lin, dtype=np.float64), upper])
        if np.all(np.diff(centers) >= 1.0 - 1e-9):
            return centers
    raise InvalidInput(f"cannot place {bands} bands on {n_freq} bins")


@lru_cache(maxsize=32)
def _erb_matrices(n_freq: int, bands: int, sample_rate: int):
    c = erb_centers(n_freq, bands, sample_rate)
    k = np.arange(n_freq, dtype=np.float64)
    W = np.zeros((bands, n_freq))
    for b in range(bands):
        left = c[b - 1] if b > 0 else None
        right = c[b + 1] if b < bands - 1 else None
        rise = np.ones_like(k) if left is None else (k - left) / (c[b] - left)
        fall = np.ones_like(k) if right is None else (right - k) / (right - c[b])
        W[b] = np.clip(np.minimum(rise, fall), 0.0, 1.0)
    W /= W.sum(axis=1, keepdims=True)
    return W, np.linalg.pinv(W)


class ErbFilterbank:
    """Triangular ERB-spaced filterbank over the linear-frequency axis.

    ``project`` averages bins into bands (rows are convex weights);
    ``unproject`` applies the Moore-Penrose pseudo-inverse, so
    ``project(unproject(project(x))) == project(x)``.
    """

    def __init__(self, n_freq: int, bands: int = 64, sample_rate: int = DEFAULT_SAMPLE_RATE):
        if bands < 2 or bands >= n_freq:
            raise InvalidInput(f"band count must satisfy 2 <= bands < {n_freq}, got {bands}")
        self.n_freq, self.bands, self.sample_rate = n_freq, bands, sample_rate
        W, Winv = _erb_matrices(n_freq, bands, sample_rate)
        self.weights = torch.from_numpy(W.copy())
        self.inverse = torch.from_numpy(Winv.copy())

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """(..., F, T) -> (..., bands, T)"""
        return torch.matmul(self.weights.to(x.dtype), x)

    def unproject(self, x: torch.Tensor) -> torch.Tensor:
        """(..., bands, T) -> (..., F, T)"""
        return torch.matmul(self.inverse.to(x.dtype), x)


def erb_project(s: ComplexSpec, bands: int = 64) -> torch.Tensor:
    """Band the magnitude of ``s``; returns (..., bands, T)."""
    fb = ErbFilterbank(s.config.n_freq, bands, s.config.sample_rate)
    return fb.project(s.magnitude)


def erb_unproject(banded: torch.Tensor, cfg: StftConfig | None = None, bands: int | None = None) -> torch.Tensor:
    cfg = cfg or StftConfig()
    fb = ErbFilterbank(cfg.n_freq, bands or banded.shape[-2], cfg.sample_rate)
    return fb.unproject(banded)


# --------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono)


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            if f.getsampwidth() != 2:
                raise IngestError(path, "only 16-bit PCM is supported")
            n_ch = f.getnchannels()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise IngestError(path, str(exc)) from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    if n_ch > 1:
        pcm = pcm.reshape(-1, n_ch).mean(axis=1)
    if pcm.size == 0:
        raise IngestError(path, "empty audio")
    return Waveform(torch.from_numpy(pcm.copy()), rate)


def write_wav(path, w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = w.numpy().astype(np.float64).reshape(-1)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())

