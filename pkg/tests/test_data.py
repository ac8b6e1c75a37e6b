import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lgtse.data import (
    SnrRanges,
    SourceBank,
    build_corpus,
    make_example,
    mix_minimum,
    snr_db,
    synth_noise,
    synth_speaker_signal,
)
from lgtse.dsp import Waveform, read_wav, write_wav
from lgtse.errors import ConfigError, InvalidInput
from lgtse.manifest import DatasetManifest


def energy_db(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return 10 * np.log10((a @ a) / (b @ b))


def test_speaker_signal_deterministic_and_normalized():
    a = synth_speaker_signal(3, 1.2)
    b = synth_speaker_signal(3, 1.2)
    assert torch.equal(a.samples, b.samples)
    assert len(a) == 9600
    assert float(a.samples.abs().max()) == pytest.approx(0.9, abs=1e-9)
    with pytest.raises(InvalidInput):
        synth_speaker_signal(3, 0.4)


def _xcorr_peak(a, b):
    a = (a - a.mean()) / np.linalg.norm(a - a.mean())
    b = (b - b.mean()) / np.linalg.norm(b - b.mean())
    n = len(a) + len(b)
    spec = np.fft.rfft(a, n) * np.conj(np.fft.rfft(b, n))
    return np.max(np.abs(np.fft.irfft(spec, n)))


def test_different_speakers_are_dissimilar():
    peaks = [_xcorr_peak(synth_speaker_signal(2 * k, 1.0).numpy(), synth_speaker_signal(2 * k + 1, 1.0).numpy())
             for k in range(20)]
    assert max(peaks) < 0.5


def test_spectral_centroid_in_speech_band():
    for seed in range(10):
        x = synth_speaker_signal(seed, 1.0).numpy()
        mag = np.abs(np.fft.rfft(x))
        f = np.fft.rfftfreq(len(x), 1 / 8000)
        centroid = (f * mag).sum() / mag.sum()
        assert 100 <= centroid <= 2000


@pytest.mark.parametrize("kind", ["pink", "brown", "modulated"])
def test_noise_kinds(kind):
    n = synth_noise(4, 4000, kind=kind)
    assert len(n) == 4000
    assert torch.equal(n.samples, synth_noise(4, 4000, kind=kind).samples)
    assert float(n.samples.pow(2).sum()) > 0


def _components(rng, lens=(8000, 9000, 10000)):
    return [Waveform(torch.from_numpy(rng.standard_normal(n))) for n in lens]


def test_minimum_mode_lengths(rng):
    ex = mix_minimum(*_components(rng), 0.0, 0.0)
    for w in (ex.target, ex.interferer, ex.noise, ex.mixture, ex.clean_mixture):
        assert len(w) == 8000


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), si=st.floats(-10, 10), sn=st.floats(-10, 10))
def test_requested_snrs_are_met(seed, si, sn):
    ex = mix_minimum(*_components(np.random.default_rng(seed), (500, 700, 600)), si, sn)
    assert abs(energy_db(ex.target.numpy(), ex.interferer.numpy()) - si) < 0.01
    assert abs(energy_db(ex.clean_mixture.numpy(), ex.noise.numpy()) - sn) < 0.01
    assert abs(snr_db(ex.target, ex.interferer) - si) < 0.01


def test_zero_db_noise_matches_clean_energy(rng):
    ex = mix_minimum(*_components(rng), 3.0, 0.0)
    e_clean = float((ex.clean_mixture.samples**2).sum())
    e_noise = float((ex.noise.samples**2).sum())
    assert abs(10 * np.log10(e_noise / e_clean)) < 0.01


def test_decomposition_residual(rng):
    ex = mix_minimum(*_components(rng), -2.0, 1.5)
    m = ex.mixture.samples
    assert float((m - ex.target.samples - ex.interferer.samples - ex.noise.samples).abs().max()) < 1e-10
    assert float((ex.clean_mixture.samples - (m - ex.noise.samples)).abs().max()) < 1e-10


def test_silent_component_rejected(rng):
    t, i, n = _components(rng)
    with pytest.raises(InvalidInput):
        mix_minimum(t, Waveform(torch.zeros(9000)), n, 0, 0)


def test_bank_validation():
    with pytest.raises(ConfigError):
        SourceBank.synthetic(speakers_per_split=(1, 2, 2)).validate()
    with pytest.raises(ConfigError):
        SourceBank.synthetic(utterances_per_speaker=1).validate()
    bank = SourceBank.synthetic(speakers_per_split=(2, 2, 2), utterances_per_speaker=2)
    bank.speakers["test"] = list(bank.speakers["train"])
    with pytest.raises(ConfigError):
        bank.validate()


def test_example_enrollment_pairing():
    bank = SourceBank.synthetic(speakers_per_split=(3, 2, 2), utterances_per_speaker=3)
    for i in range(20):
        ex = make_example(bank, "train", i, SnrRanges(), seed=1)
        ids = ex.ids
        assert ids["enrollment_speaker"] == ids["target_speaker"] != ids["interferer_speaker"]
        assert ids["enrollment_utterance"] != ids["target_utterance"]
        peak = max(float(w.samples.abs().max()) for w in (ex.mixture, ex.target, ex.noise, ex.interferer))
        assert peak <= 0.9 + 1e-12


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    bank = SourceBank.synthetic(seed=3)
    root = tmp_path_factory.mktemp("c240")
    return root, build_corpus(bank, root, n_train=240, n_dev=8, n_test=8, seed=3)


def test_corpus_counts_and_pairing(corpus):
    root, m = corpus
    assert (len(m["train"]), len(m["dev"]), len(m["test"])) == (240, 8, 8)
    assert (root / "train" / "manifest.jsonl").exists()
    for sub in ("mix", "clean_mix", "target", "enroll", "noise"):
        assert len(list((root / "train" / sub).glob("*.wav"))) == 240


def test_corpus_achieved_snrs_from_stored_audio(corpus):
    root, m = corpus
    for split in ("train", "test"):
        man = DatasetManifest.load(root / split / "manifest.jsonl")
        for r in man:
            tgt = read_wav(man.path(r, "target")).numpy().astype(np.float64)
            clean = read_wav(man.path(r, "clean_mix")).numpy().astype(np.float64)
            noise = read_wav(man.root / r.mixture.replace("mix/", "noise/")).numpy().astype(np.float64)
            assert abs(energy_db(tgt, clean - tgt) - r.snr_db_interferer) < 0.01, r.id
            assert abs(energy_db(clean, noise) - r.snr_db_noise) < 0.01, r.id
            assert -5 <= r.snr_db_interferer <= 5 and -6 <= r.snr_db_noise <= 3


def test_speaker_splits_disjoint():
    bank = SourceBank.synthetic()
    sets = {k: set(v) for k, v in bank.speakers.items()}
    assert not sets["train"] & sets["test"]
    assert not sets["train"] & sets["dev"]
    assert not sets["dev"] & sets["test"]


def test_corpus_is_byte_identical_under_seed(tmp_path):
    bank = SourceBank.synthetic(speakers_per_split=(3, 2, 2), utterances_per_speaker=3, seed=9)
    a = build_corpus(bank, tmp_path / "a", 6, 2, 2, seed=9)
    b = build_corpus(SourceBank.synthetic(speakers_per_split=(3, 2, 2), utterances_per_speaker=3, seed=9),
                     tmp_path / "b", 6, 2, 2, seed=9)
    for split in a:
        assert (tmp_path / "a" / split / "manifest.jsonl").read_bytes() == \
            (tmp_path / "b" / split / "manifest.jsonl").read_bytes()
    for p in sorted((tmp_path / "a").rglob("*.wav")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
    c = build_corpus(bank, tmp_path / "c", 6, 2, 2, seed=10)
    assert c["train"].dumps() != a["train"].dumps()


def test_directory_bank_matches_manifest_contract(tmp_path):
    for split in ("train", "dev", "test"):
        for s in range(2):
            for u in range(2):
                w = synth_speaker_signal(10 * ('train', 'dev', 'test').index(split) + s, 1.0, u)
                write_wav(tmp_path / "src" / split / f"s{s}" / f"u{u}.wav", w)
    bank = SourceBank.from_directory(tmp_path / "src")
    m = build_corpus(bank, tmp_path / "out", 3, 2, 2, seed=0)
    synth = build_corpus(SourceBank.synthetic(speakers_per_split=(2, 2, 2), utterances_per_speaker=2),
                         tmp_path / "syn", 3, 2, 2, seed=0)
    line_real = m["train"].dumps().splitlines()[0]
    line_syn = synth["train"].dumps().splitlines()[0]
    assert list(json.loads(line_real)) == list(json.loads(line_syn))
    assert bank.speakers["train"] == ["train-s0", "train-s1"]
