"""SI-SDR, the two-term training objective, SI-SDR improvement, STOI, evaluation reports."""
from __future__ import annotations

import json
import os
import re
import subprocess
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import resample_poly

from .dsp import Waveform
from .errors import InvalidInput, ShapeError

SI_SDR_CLAMP = 60.0
LOSS_EPS = 1e-8
PESQ_ENV = "LGTSE_PESQ_BIN"


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        return x.samples
    return torch.as_tensor(x)


def _check_pair(est: torch.Tensor, ref: torch.Tensor):
    if est.shape != ref.shape:
        raise ShapeError(f"estimate {tuple(est.shape)} vs reference {tuple(ref.shape)}")
    if est.shape[-1] < 1:
        raise InvalidInput("empty signals")


def si_sdr(estimate, reference, clamp: float = SI_SDR_CLAMP):
    """SI-SDR in dB, clamped to [-clamp, +clamp].

    Returns a float for Waveform inputs and a tensor (one value per leading
    index) for tensor inputs. No mean removal is applied.
    """
    scalar = isinstance(estimate, Waveform) and isinstance(reference, Waveform)
    est = _as_tensor(estimate).detach().double()
    ref = _as_tensor(reference).detach().double()
    _check_pair(est, ref)
    ref_energy = (ref * ref).sum(-1)
    if (ref_energy == 0).any():
        raise InvalidInput("reference is identically zero")
    alpha = (est * ref).sum(-1, keepdim=True) / ref_energy.unsqueeze(-1)
    proj = alpha * ref
    err = est - proj
    sig = (proj * proj).sum(-1)
    noise = (err * err).sum(-1)
    val = 10 * (torch.log10(sig) - torch.log10(noise))
    val = torch.nan_to_num(val, nan=-clamp).clamp(-clamp, clamp)
    return float(val) if scalar else val


def si_sdr_loss_form(estimate: torch.Tensor, reference: torch.Tensor, eps: float = LOSS_EPS) -> torch.Tensor:
    """Differentiable, un-clamped SI-SDR with eps added to both energies."""
    _check_pair(estimate, reference)
    alpha = (estimate * reference).sum(-1, keepdim=True) / ((reference * reference).sum(-1, keepdim=True) + eps)
    proj = alpha * reference
    err = estimate - proj
    return 10 * torch.log10(((proj * proj).sum(-1) + eps) / ((err * err).sum(-1) + eps))


def _clamped(x: torch.Tensor, clamp: float = SI_SDR_CLAMP) -> torch.Tensor:
    # value of the clamped metric, gradient of the raw one
    return x + (x.clamp(-clamp, clamp) - x).detach()


@dataclass
class LossValue:
    total: torch.Tensor
    denoiser_term: torch.Tensor
    backbone_term: torch.Tensor
    weights: tuple[float, float] = (1.0, 1.0)

    def item(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "denoiser_term": float(self.denoiser_term.detach()),
            "backbone_term": float(self.backbone_term.detach()),
        }


def joint_loss(y_d, y_clean, y_hat, y_target, weights=(1.0, 1.0)) -> LossValue:
    """-SI-SDR(y_d, y_clean) - SI-SDR(y_hat, y_target), batch-averaged per term.

    A term whose weight is zero may be passed as ``None`` inputs.
    """
    w_d, w_b = weights

    def term(est, ref, w):
        if est is None or ref is None:
            if w != 0:
                raise InvalidInput("a weighted loss term is missing its inputs")
            return torch.zeros(())
        return -_clamped(si_sdr_loss_form(_as_tensor(est), _as_tensor(ref))).mean()

    d = term(y_d, y_clean, w_d)
    b = term(y_hat, y_target, w_b)
    return LossValue(w_d * d + w_b * b, d, b, (w_d, w_b))


def si_sdri(estimate, reference, mixture):
    return si_sdr(estimate, reference) - si_sdr(mixture, reference)


# --------------------------------------------------------------------------
# STOI

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150
STOI_SEG = 30  # frames per 384 ms segment
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def _hann(n):
    return np.hanning(n + 2)[1:-1]


def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((bands, len(f)))
    for i in range(bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x, n, hop):
    idx = np.arange(0, len(x) - n, hop)
    return np.stack([x[i : i + n] for i in idx]) if len(idx) else np.zeros((0, n))


def _drop_silent(x, y, dyn_range=STOI_DYN_RANGE, n=STOI_FRAME, hop=STOI_FRAME // 2):
    w = _hann(n)
    xf = _frames(x, n, hop) * w
    yf = _frames(y, n, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    m = len(xf)
    out_len = (m - 1) * hop + n if m else 0
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(m):
        xs[i * hop : i * hop + n] += xf[i]
        ys[i * hop : i * hop + n] += yf[i]
    return xs, ys


def _band_envelopes(x, obm):
    frames = _frames(x, STOI_FRAME, STOI_FRAME // 2) * _hann(STOI_FRAME)
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)


def stoi(estimate, reference, sample_rate: int | None = None) -> float:
    """Short-time objective intelligibility in [0, 1] (classic, non-extended)."""
    if sample_rate is None:
        sample_rate = reference.sample_rate if isinstance(reference, Waveform) else 8000
    x = np.asarray(_as_tensor(reference).detach().double().cpu().numpy()).reshape(-1)
    y = np.asarray(_as_tensor(estimate).detach().double().cpu().numpy()).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"estimate {y.shape} vs reference {x.shape}")
    if sample_rate < 8000:
        raise InvalidInput("STOI needs a sample rate of at least 8 kHz")
    if len(x) < 0.384 * sample_rate:
        raise InvalidInput(f"signal of {len(x)} samples is shorter than one 384 ms segment")
    if sample_rate != STOI_FS:
        g = np.gcd(STOI_FS, sample_rate)
        x = resample_poly(x, STOI_FS // g, sample_rate // g)
        y = resample_poly(y, STOI_FS // g, sample_rate // g)

    x, y = _drop_silent(x, y)
    obm = third_octave_matrix()
    x_env = _band_envelopes(x, obm)
    y_env = _band_envelopes(y, obm)
    n_frames = x_env.shape[1]
    if n_frames < STOI_SEG:
        warnings.warn("not enough non-silent frames for STOI; returning 1e-5")
        return 1e-5

    clip = 10 ** (-STOI_BETA / 20)
    scores = []
    for m in range(STOI_SEG, n_frames + 1):
        xs = x_env[:, m - STOI_SEG : m]
        ys = y_env[:, m - STOI_SEG : m]
        gain = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        yp = np.minimum(ys * gain, xs * (1 + clip))
        xn = xs - xs.mean(axis=1, keepdims=True)
        yn = yp - yp.mean(axis=1, keepdims=True)
        xn /= np.linalg.norm(xn, axis=1, keepdims=True) + _EPS
        yn /= np.linalg.norm(yn, axis=1, keepdims=True) + _EPS
        scores.append((xn * yn).sum(axis=1))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# PESQ hook (external evaluator only)


def external_pesq(reference_wav, estimate_wav, sample_rate: int) -> float | None:
    """Run the evaluator named by $LGTSE_PESQ_BIN; None when unset or unparsable."""
    exe = os.environ.get(PESQ_ENV)
    if not exe:
        return None
    try:
        out = subprocess.run(
            [exe, str(reference_wav), str(estimate_wav), str(sample_rate)],
            capture_output=True, text=True, timeout=120, check=False,
        ).stdout
    except (OSError, subprocess.SubprocessError):
        return None
    nums = re.findall(r"[-+]?\d+\.\d+", out)
    return float(nums[-1]) if nums else None


# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    def _mean(self, key):
        vals = [r[key] for r in self.records if r.get(key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_si_sdr(self) -> float:
        return self._mean("si_sdr")

    @property
    def mean_si_sdri(self) -> float:
        return self._mean("si_sdri")

    @property
    def mean_stoi(self) -> float:
        return self._mean("stoi")

    def summary(self) -> dict:
        pesq = [r["pesq"] for r in self.records if r.get("pesq") is not None]
        return {
            "count": self.count,
            "failures": len(self.failures),
            "si_sdr_db": self.mean_si_sdr,
            "si_sdri_db": self.mean_si_sdri,
            "stoi": self.mean_stoi,
            "stoi_pct": 100 * self.mean_stoi,
            "pesq": float(np.mean(pesq)) if pesq else "n/a",
        }

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.txt`` (key=value summary) and ``<stem>.jsonl`` (per-utterance records)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        txt, jl = stem.with_suffix(".txt"), stem.with_suffix(".jsonl")
        txt.write_text("".join(f"{k}={v}\n" for k, v in self.summary().items()))
        with open(jl, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")
            for r in self.failures:
                f.write(json.dumps({"failed": True, **r}) + "\n")
        return txt, jl
