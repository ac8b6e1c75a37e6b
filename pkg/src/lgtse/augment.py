"""Distortion-aware data usage: concatenation, on-the-fly batch doubling, offline merging.

Whatever the strategy, guidance always comes from the denoised mixture.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .dsp import DrcConfig, StftConfig, Waveform, istft_tensor, power_law, read_wav, stft_tensor, write_wav
from .errors import ConfigError, DataError
from .guidance import GuidanceSource, Layout, interact
from .manifest import DENOISED, ORIGINAL, DatasetManifest

DENOISED_SUFFIX = "_dn"


@dataclass(frozen=True)
class Strategy:
    name: str
    layout: Layout
    enlarge_batches: bool
    dataset: str  # "original" or "merged"


STRATEGIES = {
    "base": Strategy("base", Layout.BASE, False, "original"),
    "concat": Strategy("concat", Layout.DISTORTION, False, "original"),
    "on_the_fly": Strategy("on_the_fly", Layout.BASE, True, "original"),
    "offline": Strategy("offline", Layout.BASE, False, "merged"),
}


def select_strategy(name: str) -> Strategy:
    key = name.replace("-", "_")
    if key not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}")
    return STRATEGIES[key]


@dataclass
class BatchItem:
    spec: torch.Tensor  # (2F, T) compressed input the mask is applied to
    guidance: torch.Tensor  # (2F, T)
    target: torch.Tensor  # (L,)
    provenance: str
    guidance_source: GuidanceSource = GuidanceSource.DENOISED


@dataclass
class TrainingBatch:
    items: list[BatchItem]
    denoised: torch.Tensor | None = None  # Y_d of the originals, (N, 2F, T)

    def __len__(self):
        return len(self.items)

    def specs(self) -> torch.Tensor:
        return torch.stack([it.spec for it in self.items])

    def guidance(self) -> torch.Tensor:
        return torch.stack([it.guidance for it in self.items])

    def targets(self) -> torch.Tensor:
        return torch.stack([it.target for it in self.items])

    def provenance(self) -> list[str]:
        return [it.provenance for it in self.items]


def make_onthefly_batch(Y: torch.Tensor, E: torch.Tensor, targets: torch.Tensor, denoiser) -> TrainingBatch:
    """N originals -> 2N items: each (Y_i, G_i) plus its denoised twin (Yd_i, G_i), same target.

    ``G_i`` is computed once from ``Yd_i`` and shared by both members of the pair.
    """
    Y_d = denoiser(Y)
    G = interact(E, Y_d)
    originals = [BatchItem(Y[i], G[i], targets[i], ORIGINAL) for i in range(len(Y))]
    twins = [BatchItem(Y_d[i], it.guidance, it.target, DENOISED) for i, it in enumerate(originals)]
    return TrainingBatch(originals + twins, Y_d)


@torch.no_grad()
def denoise_waveform(
    x: torch.Tensor, denoiser, stft_cfg: StftConfig = StftConfig(), drc: DrcConfig = DrcConfig()
) -> torch.Tensor:
    """Time-domain in, time-domain out through the compressed-spectrum denoiser."""
    Y = power_law(stft_tensor(x.float().unsqueeze(0), stft_cfg), drc.beta)
    Y_d = denoiser(Y)
    return istft_tensor(power_law(Y_d, 1.0 / drc.beta), stft_cfg, x.shape[-1])[0]


def build_offline_dataset(
    manifest: DatasetManifest,
    denoiser,
    seed: int,
    out_path=None,
    stft_cfg: StftConfig = StftConfig(),
    drc: DrcConfig = DrcConfig(),
    suffix: str = DENOISED_SUFFIX,
) -> DatasetManifest:
    """Denoise every mixture to ``<name><suffix>.wav`` beside it, merge with the originals, shuffle under ``seed``."""
    was_training = getattr(denoiser, "training", False)
    if hasattr(denoiser, "eval"):
        denoiser.eval()
    denoised = []
    try:
        for rec in manifest:
            src = manifest.path(rec, "mixture")
            w = read_wav(src)
            y = denoise_waveform(w.samples, denoiser, stft_cfg, drc)
            if not torch.isfinite(y).all():
                raise DataError(f"denoiser produced non-finite output for {src}")
            rel = Path(rec.mixture)
            rel = rel.with_name(rel.stem + suffix + rel.suffix)
            write_wav(manifest.root / rel, Waveform(y, w.sample_rate))
            denoised.append(replace(rec, id=rec.id + suffix, mixture=rel.as_posix(), provenance=DENOISED))
    finally:
        if was_training:
            denoiser.train()

    originals = [replace(r, provenance=r.provenance or ORIGINAL) for r in manifest]
    merged = originals + denoised
    order = np.random.default_rng(seed).permutation(len(merged))
    out = DatasetManifest([merged[i] for i in order], manifest.root, seed)
    if out_path is not None:
        out_path = Path(out_path)
        if out_path.parent.resolve() != manifest.root.resolve():
            out = out.rebased(out_path.parent)
        out.save(out_path)
    return out


def check_provenance(manifest: DatasetManifest, suffix: str = DENOISED_SUFFIX) -> None:
    """Every denoised record must point at the same enrollment/target as an original."""
    originals = {r.id: r for r in manifest if r.provenance == ORIGINAL}
    for r in manifest:
        if r.provenance != DENOISED:
            continue
        src = originals.get(r.id[: -len(suffix)]) if r.id.endswith(suffix) else None
        if src is None or (src.enrollment, src.target, src.clean_mix) != (r.enrollment, r.target, r.clean_mix):
            raise DataError(f"denoised record {r.id} does not match its original")
