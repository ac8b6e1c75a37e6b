"""Desk-scale "2-speaker + noise" corpus simulation in minimum mode.

Synthetic speakers are harmonic sources with a speaker-specific pitch range
and formant envelope; utterances vary intonation, syllable timing and vowel
colour. A directory of real recordings laid out as
``<root>/<split>/<speaker>/<utterance>.wav`` can replace them.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dsp import DEFAULT_SAMPLE_RATE, Waveform, read_wav, write_wav
from .errors import ConfigError, InvalidInput
from .manifest import ORIGINAL, DatasetManifest, ManifestRecord

SPLITS = ("train", "dev", "test")
PEAK = 0.9


def _stable(*parts) -> int:
    """Deterministic 32-bit integer from strings/ints (hash() is salted per process)."""
    return zlib.crc32("/".join(map(str, parts)).encode())


def _speaker_traits(speaker_seed: int) -> dict:
    rng = np.random.default_rng([speaker_seed, 7919])
    return {
        "f0": rng.uniform(80.0, 300.0),
        "formants": np.array([rng.uniform(300, 900), rng.uniform(900, 2200), rng.uniform(2200, 3300)]),
        "bandwidths": np.array([rng.uniform(60, 120), rng.uniform(90, 180), rng.uniform(150, 300)]),
        "tilt": rng.uniform(0.6, 1.2),
        "vibrato_hz": rng.uniform(4.0, 6.5),
        "vibrato_depth": rng.uniform(0.01, 0.03),
        "breath": rng.uniform(0.05, 0.2),
    }


def _envelope(freqs: np.ndarray, formants: np.ndarray, bws: np.ndarray, tilt: float) -> np.ndarray:
    g = np.zeros_like(freqs)
    for fc, bw, w in zip(formants, bws, (1.0, 0.7, 0.4)):
        g += w / (1.0 + ((freqs - fc) / bw) ** 2)
    return (g + 0.02) / (1.0 + freqs / 500.0) ** tilt


def _syllables(rng, n: int, sr: int) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude envelope with pauses, plus a per-sample syllable index."""
    env = np.zeros(n)
    idx = np.zeros(n, dtype=int)
    pos, k = int(rng.uniform(0.0, 0.08) * sr), 0
    while pos < n:
        dur = int(rng.uniform(0.12, 0.32) * sr)
        seg = np.hanning(dur + 2)[1:-1] ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(n, pos + dur)
        env[pos:end] = seg[: end - pos]
        idx[pos:end] = k
        gap = int(rng.uniform(0.02, 0.12) * sr)
        idx[end : min(n, end + gap)] = k
        pos, k = end + gap, k + 1
    return env, idx


def synth_speaker_signal(
    speaker_seed: int, duration: float, utterance: int = 0, sample_rate: int = DEFAULT_SAMPLE_RATE
) -> Waveform:
    """Speech-like signal for one speaker; deterministic per (speaker_seed, utterance, duration)."""
    if duration < 0.5:
        raise InvalidInput("duration must be at least 0.5 s")
    tr = _speaker_traits(speaker_seed)
    rng = np.random.default_rng([speaker_seed, utterance, 104729])
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    nyq = sample_rate / 2

    contour = (
        1.0
        + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi))
        + tr["vibrato_depth"] * np.sin(2 * np.pi * tr["vibrato_hz"] * t)
        + rng.uniform(-0.05, 0.05) * t / max(duration, 1e-9)
    )
    f0 = tr["f0"] * contour
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    env, syl = _syllables(rng, n, sample_rate)
    vowel = rng.uniform(0.85, 1.15, size=(syl.max() + 1, 3))
    formants = tr["formants"][None, :] * vowel[syl]  # (n, 3)

    n_harm = int(nyq // (tr["f0"] * 0.9))
    h = np.arange(1, n_harm + 1)[:, None]
    freqs = h * f0[None, :]
    amp = np.zeros_like(freqs)
    for j in range(3):
        amp += (1.0, 0.7, 0.4)[j] / (1.0 + ((freqs - formants[None, :, j]) / tr["bandwidths"][j]) ** 2)
    amp = (amp + 0.02) / (1.0 + freqs / 500.0) ** tr["tilt"]
    amp[freqs > 0.95 * nyq] = 0.0
    voiced = (amp * np.sin(h * phase[None, :] + rng.uniform(0, 2 * np.pi, size=(n_harm, 1)))).sum(0)

    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    fgrid = np.fft.rfftfreq(n, 1.0 / sample_rate)
    breath = np.fft.irfft(spec * _envelope(fgrid, tr["formants"], tr["bandwidths"], tr["tilt"]), n)

    voiced /= np.abs(voiced).max() + 1e-12
    breath /= np.abs(breath).max() + 1e-12
    x = env * (voiced + tr["breath"] * breath)
    x *= PEAK / (np.abs(x).max() + 1e-12)
    return Waveform(torch.from_numpy(x), sample_rate)


def synth_noise(seed: int, n_samples: int, sample_rate: int = DEFAULT_SAMPLE_RATE, kind: str | None = None) -> Waveform:
    """Seeded coloured noise: pink, brown, or slowly modulated pink ("babble-like")."""
    rng = np.random.default_rng([seed, 15485863])
    kind = kind or ("pink", "brown", "modulated")[rng.integers(3)]
    spec = np.fft.rfft(rng.standard_normal(n_samples))
    f = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
    f[0] = f[1] if len(f) > 1 else 1.0
    if kind == "pink":
        spec /= np.sqrt(f)
    elif kind == "brown":
        spec /= f ** 0.8
    elif kind == "modulated":
        spec /= np.sqrt(f)
    else:
        raise InvalidInput(f"unknown noise kind {kind!r}")
    x = np.fft.irfft(spec, n_samples)
    if kind == "modulated":
        t = np.arange(n_samples) / sample_rate
        mod = np.zeros(n_samples)
        for _ in range(4):
            mod += np.sin(2 * np.pi * rng.uniform(0.5, 4.0) * t + rng.uniform(0, 2 * np.pi))
        x *= 1.0 + 0.6 * mod / 4
    x *= PEAK / (np.abs(x).max() + 1e-12)
    return Waveform(torch.from_numpy(x), sample_rate)


# --------------------------------------------------------------------------


@dataclass
class MixtureExample:
    target: Waveform
    interferer: Waveform  # scaled
    noise: Waveform  # scaled
    mixture: Waveform
    clean_mixture: Waveform
    snr_interferer_db: float
    snr_noise_db: float
    enrollment: Waveform | None = None
    ids: dict = field(default_factory=dict)

    def scaled(self, gain: float) -> "MixtureExample":
        """All mixture components multiplied by ``gain`` (SNRs unchanged)."""
        s = lambda w: Waveform(w.samples * gain, w.sample_rate)  # noqa: E731
        return replace(
            self,
            target=s(self.target),
            interferer=s(self.interferer),
            noise=s(self.noise),
            mixture=s(self.mixture),
            clean_mixture=s(self.clean_mixture),
        )


def _energy(x: torch.Tensor) -> float:
    return float((x.double() ** 2).sum())


def snr_db(signal, other) -> float:
    a = signal.samples if isinstance(signal, Waveform) else torch.as_tensor(signal)
    b = other.samples if isinstance(other, Waveform) else torch.as_tensor(other)
    return 10 * np.log10(_energy(a) / _energy(b))


def mix_minimum(target, interferer, noise, snr_interferer_db: float, snr_noise_db: float) -> MixtureExample:
    """Truncate to the shortest component, then mix at the requested SNRs.

    The interferer is scaled against the target and the noise against the
    clean two-speaker mixture.
    """
    parts = [w if isinstance(w, Waveform) else Waveform(torch.as_tensor(w)) for w in (target, interferer, noise)]
    rates = {w.sample_rate for w in parts}
    if len(rates) != 1:
        raise InvalidInput(f"components disagree on sample rate: {sorted(rates)}")
    sr = rates.pop()
    n = min(len(w) for w in parts)
    s, i, v = (w.samples[..., :n].double() for w in parts)
    for name, x in (("target", s), ("interferer", i), ("noise", v)):
        if _energy(x) == 0:
            raise InvalidInput(f"{name} is silent")

    i = i * np.sqrt(_energy(s) / (_energy(i) * 10 ** (snr_interferer_db / 10)))
    clean = s + i
    v = v * np.sqrt(_energy(clean) / (_energy(v) * 10 ** (snr_noise_db / 10)))
    mix = clean + v
    W = lambda x: Waveform(x, sr)  # noqa: E731
    return MixtureExample(W(s), W(i), W(v), W(mix), W(clean), float(snr_interferer_db), float(snr_noise_db))


# --------------------------------------------------------------------------


@dataclass
class SourceBank:
    """Per-split speaker pools plus a noise source.

    ``speakers`` maps split -> speaker ids; ``utterances`` maps speaker id ->
    utterance keys; ``load(speaker, utterance)`` returns a Waveform.
    """

    speakers: dict[str, list[str]]
    utterances: dict[str, list[str]]
    load: Callable[[str, str], Waveform]
    noise: Callable[[int, int], Waveform]
    sample_rate: int = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def validate(self):
        for split in SPLITS:
            if len(self.speakers.get(split, [])) < 2:
                raise ConfigError(f"split {split!r} needs at least two speakers")
        seen = {}
        for split, spks in self.speakers.items():
            for spk in spks:
                if spk in seen and seen[spk] != split:
                    raise ConfigError(f"speaker {spk} appears in both {seen[spk]} and {split}")
                seen[spk] = split
                if len(self.utterances.get(spk, [])) < 2:
                    raise ConfigError(f"speaker {spk} has fewer than two utterances")

    @classmethod
    def synthetic(
        cls,
        speakers_per_split=(12, 4, 4),
        utterances_per_speaker: int = 8,
        duration_range=(1.0, 2.0),
        seed: int = 0,
        sample_rate: int = DEFAULT_SAMPLE_RATE,
    ) -> "SourceBank":
        speakers = {
            split: [f"{split}-spk{i:02d}" for i in range(n)] for split, n in zip(SPLITS, speakers_per_split)
        }
        utterances = {spk: [f"u{j:02d}" for j in range(utterances_per_speaker)] for v in speakers.values() for spk in v}
        lo, hi = duration_range

        def load(spk, utt):
            dur = np.random.default_rng(_stable(seed, spk, utt, "dur")).uniform(lo, hi)
            return synth_speaker_signal(_stable(seed, spk), dur, int(utt[1:]), sample_rate)

        return cls(speakers, utterances, load, lambda s, n: synth_noise(s, n, sample_rate), sample_rate, seed)

    @classmethod
    def from_directory(cls, root, noise_root=None, sample_rate: int = DEFAULT_SAMPLE_RATE, seed: int = 0) -> "SourceBank":
        root = Path(root)
        speakers, utterances, paths = {}, {}, {}
        for split in SPLITS:
            speakers[split] = []
            for spk_dir in sorted(p for p in (root / split).glob("*") if p.is_dir()):
                spk = f"{split}-{spk_dir.name}"
                speakers[split].append(spk)
                files = sorted(spk_dir.glob("*.wav"))
                utterances[spk] = [f.stem for f in files]
                paths.update({(spk, f.stem): f for f in files})

        def load(spk, utt):
            w = read_wav(paths[(spk, utt)])
            if w.sample_rate != sample_rate:
                raise ConfigError(f"{paths[(spk, utt)]} is {w.sample_rate} Hz, expected {sample_rate}")
            return Waveform(w.samples.double(), w.sample_rate)

        noise_files = sorted(Path(noise_root).glob("*.wav")) if noise_root else []

        def noise(s, n):
            if not noise_files:
                return synth_noise(s, n, sample_rate)
            w = read_wav(noise_files[s % len(noise_files)]).samples.double()
            reps = int(np.ceil(n / len(w)))
            return Waveform(w.repeat(reps)[:n], sample_rate)

        return cls(speakers, utterances, load, noise, sample_rate, seed)


@dataclass(frozen=True)
class SnrRanges:
    interferer: tuple[float, float] = (-5.0, 5.0)
    noise: tuple[float, float] = (-6.0, 3.0)


def make_example(bank: SourceBank, split: str, index: int, ranges: SnrRanges, seed: int) -> MixtureExample:
    """One mixture; draws from its own RNG stream so examples can be built in any order."""
    rng = np.random.default_rng([seed, SPLITS.index(split), index])
    spks = bank.speakers[split]
    t_spk, i_spk = rng.choice(len(spks), size=2, replace=False)
    t_spk, i_spk = spks[t_spk], spks[i_spk]
    t_utt, e_utt = rng.choice(bank.utterances[t_spk], size=2, replace=False)
    i_utt = rng.choice(bank.utterances[i_spk])
    snr_i = float(rng.uniform(*ranges.interferer))
    snr_n = float(rng.uniform(*ranges.noise))
    noise_seed = int(rng.integers(2**31))

    target = bank.load(t_spk, t_utt)
    interferer = bank.load(i_spk, i_utt)
    noise = bank.noise(noise_seed, max(len(target), len(interferer)))
    ex = mix_minimum(target, interferer, noise, snr_i, snr_n)
    # every stored component must fit the 16-bit range
    peak = max(float(w.samples.abs().max()) for w in (ex.mixture, ex.clean_mixture, ex.target, ex.interferer, ex.noise))
    ex = ex.scaled(PEAK / peak)
    ex.enrollment = bank.load(t_spk, e_utt)
    ex.ids = {"target_speaker": t_spk, "target_utterance": t_utt, "enrollment_speaker": t_spk,
              "enrollment_utterance": e_utt, "interferer_speaker": i_spk, "interferer_utterance": i_utt,
              "noise_seed": noise_seed}
    return ex


def build_corpus(
    bank: SourceBank,
    root,
    n_train: int = 240,
    n_dev: int = 40,
    n_test: int = 40,
    ranges: SnrRanges = SnrRanges(),
    seed: int = 0,
) -> dict[str, DatasetManifest]:
    """Write ``<root>/<split>/{mix,clean_mix,target,enroll,noise}/<id>.wav`` and ``<root>/<split>/manifest.jsonl``."""
    bank.validate()
    root = Path(root)
    manifests = {}
    for split, count in zip(SPLITS, (n_train, n_dev, n_test)):
        d = root / split
        records = []
        for i in range(count):
            ex = make_example(bank, split, i, ranges, seed)
            rid = f"{split}_{i:05d}"
            for sub, w in (("mix", ex.mixture), ("clean_mix", ex.clean_mixture), ("target", ex.target),
                           ("enroll", ex.enrollment), ("noise", ex.noise)):
                write_wav(d / sub / f"{rid}.wav", w)
            records.append(ManifestRecord(
                id=rid,
                mixture=f"mix/{rid}.wav",
                enrollment=f"enroll/{rid}.wav",
                target=f"target/{rid}.wav",
                clean_mix=f"clean_mix/{rid}.wav",
                provenance=ORIGINAL,
                snr_db_noise=round(ex.snr_noise_db, 6),
                snr_db_interferer=round(ex.snr_interferer_db, 6),
                seed=seed,
            ))
        m = DatasetManifest(records, d, seed)
        m.save(d / "manifest.jsonl")
        manifests[split] = m
    return manifests
