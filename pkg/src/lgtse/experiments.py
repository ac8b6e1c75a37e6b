"""Desk-scale system comparison across seeds.

Systems (one shared stage-1 denoiser per seed):

* ``E1``  no denoiser, guidance from the noisy mixture, backbone trained for
          ``backbone_epochs + finetune_epochs`` epochs
* ``E2``  denoised guidance, backbone pretraining then joint fine-tuning
* ``E5``  as E2 on the merged original + offline-denoised corpus, with half
          the epochs so the optimizer sees the same number of steps
* ``S1``  E5's frozen-denoiser backbone before joint fine-tuning

Run with ``python -m lgtse.experiments --root DIR``.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import build_offline_dataset, check_provenance
from .data import SnrRanges, SourceBank, build_corpus, make_example
from .manifest import DatasetManifest
from .metrics import si_sdr
from .train import Extractor, OracleDenoiser, TrainPlan, evaluate, guidance_arrays, load_clips, load_extractor, run_stage

log = logging.getLogger(__name__)

SYSTEMS = ("E1", "E2", "E5", "S1")
ORDER = (("E5", "E2"), ("E2", "E1"))  # (better, worse)


@dataclass
class MatrixConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus_seed: int = 0
    n_train: int = 240
    n_dev: int = 40
    n_test: int = 40
    denoiser_epochs: int = 6
    backbone_epochs: int = 6
    finetune_epochs: int = 4
    batch_size: int = 8
    with_stoi: bool = False
    soft_margin_db: float = 0.3
    n_guidance: int = 50


@dataclass
class SeedResult:
    seed: int
    denoiser_gain_db: float
    si_sdri: dict[str, float]
    seconds: float
    guidance_cosine: dict[str, float] = field(default_factory=dict)


@dataclass
class MatrixReport:
    config: MatrixConfig
    seeds: list[SeedResult] = field(default_factory=list)
    seconds: float = 0.0

    def mean(self, system: str) -> float:
        return float(np.mean([s.si_sdri[system] for s in self.seeds]))

    @property
    def mean_denoiser_gain(self) -> float:
        return float(np.mean([s.denoiser_gain_db for s in self.seeds]))

    def mean_cosine(self, source: str) -> float:
        return float(np.mean([s.guidance_cosine[source] for s in self.seeds]))

    def ordering(self) -> list[dict]:
        """One row per required pair: ``ok``, ``soft`` (short by at most the margin) or ``fail``."""
        rows = []
        for hi, lo in ORDER:
            gap = self.mean(hi) - self.mean(lo)
            status = "ok" if gap >= 0 else "soft" if gap >= -self.config.soft_margin_db else "fail"
            rows.append({"pair": f"{hi}>={lo}", "gap_db": gap, "status": status})
        return rows

    def table(self) -> str:
        head = "seed  " + "  ".join(f"{s:>6}" for s in SYSTEMS) + "  den_gain"
        lines = [head]
        for r in self.seeds:
            lines.append(f"{r.seed:<4}  " + "  ".join(f"{r.si_sdri[s]:6.2f}" for s in SYSTEMS)
                         + f"  {r.denoiser_gain_db:8.2f}")
        lines.append("mean  " + "  ".join(f"{self.mean(s):6.2f}" for s in SYSTEMS)
                     + f"  {self.mean_denoiser_gain:8.2f}")
        for row in self.ordering():
            lines.append(f"{row['pair']}: gap {row['gap_db']:+.2f} dB [{row['status']}]")
        lines.append(f"guidance cosine to oracle: denoised {self.mean_cosine('denoised'):.4f}, "
                     f"noisy {self.mean_cosine('noisy'):.4f}")
        lines.append(f"wall time {self.seconds:.0f} s")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seeds": [asdict(s) for s in self.seeds],
            "mean_si_sdri": {s: self.mean(s) for s in SYSTEMS},
            "mean_denoiser_gain_db": self.mean_denoiser_gain,
            "mean_guidance_cosine": {k: self.mean_cosine(k) for k in ("denoised", "noisy")},
            "ordering": self.ordering(),
            "seconds": self.seconds,
        }


def denoiser_gain(ckpt, manifest: DatasetManifest) -> float:
    """Mean SI-SDR gain of the stage-1 denoiser against the clean two-speaker mixture."""
    ex = load_extractor(ckpt)
    gains = []
    for c in load_clips(manifest):
        gains.append(float(si_sdr(ex.enhance(c.mix), c.clean)) - float(si_sdr(c.mix, c.clean)))
    return float(np.mean(gains))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel().astype(np.float64), b.ravel().astype(np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def guidance_similarity(denoiser, bank: SourceBank, n: int = 50, seed: int = 1000,
                        noise_snr=(-6.0, 0.0)) -> dict[str, float]:
    """Mean cosine similarity of denoised-mixture and noisy-mixture guidance to oracle-clean guidance.

    Examples are fresh held-out mixtures with noise at or below 0 dB SNR.
    """
    ranges = SnrRanges(noise=noise_snr)
    sims = {"denoised": [], "noisy": []}
    for i in range(n):
        ex = make_example(bank, "test", i, ranges, seed)
        mix, enroll = ex.mixture.samples, ex.enrollment.samples
        ref = guidance_arrays(denoiser, mix, enroll)
        oracle_spec = Extractor().compress(ex.clean_mixture.samples.float()[None])
        oracle = guidance_arrays(OracleDenoiser(oracle_spec), mix, enroll)["guidance_denoised"]
        sims["denoised"].append(_cosine(ref["guidance_denoised"], oracle))
        sims["noisy"].append(_cosine(ref["guidance_noisy"], oracle))
    return {k: float(np.mean(v)) for k, v in sims.items()}


def run_seed(cfg: MatrixConfig, seed: int, corpus: dict[str, DatasetManifest], root: Path,
             bank: SourceBank | None = None) -> SeedResult:
    t0 = time.time()
    out = root / f"seed{seed}"
    train, dev, test = (load_clips(corpus[s]) for s in ("train", "dev", "test"))

    def plan(stage, epochs, strategy="base", **kw):
        return TrainPlan(stage, strategy, epochs=epochs, batch_size=cfg.batch_size, seed=seed, **kw)

    den = run_stage(plan("pretrain_denoiser", cfg.denoiser_epochs), train, dev, out / "denoiser").path
    gain = denoiser_gain(den, corpus["test"])
    bank = bank or SourceBank.synthetic(seed=cfg.corpus_seed)
    cos = guidance_similarity(load_extractor(den).denoiser, bank, cfg.n_guidance, seed=1000 + seed)

    e1 = run_stage(plan("pretrain_backbone", cfg.backbone_epochs + cfg.finetune_epochs,
                        identity_denoiser=True, guidance="noisy"), train, dev, out / "E1").path

    bb = run_stage(plan("pretrain_backbone", cfg.backbone_epochs), train, dev, out / "E2_backbone",
                   denoiser_ckpt=den).path
    e2 = run_stage(plan("joint_finetune", cfg.finetune_epochs), train, dev, out / "E2",
                   denoiser_ckpt=den, backbone_ckpt=bb).path

    suffix = f"_dn_s{seed}"
    merged = build_offline_dataset(corpus["train"], load_extractor(den).denoiser, seed,
                                   corpus["train"].root / f"merged_s{seed}.jsonl", suffix=suffix)
    check_provenance(merged, suffix)
    merged_clips = load_clips(merged)
    s1 = run_stage(plan("pretrain_backbone", max(cfg.backbone_epochs // 2, 1), "offline"), merged_clips, dev,
                   out / "E5_backbone", denoiser_ckpt=den).path
    e5 = run_stage(plan("joint_finetune", max(cfg.finetune_epochs // 2, 1), "offline"), merged_clips, dev,
                   out / "E5", denoiser_ckpt=den, backbone_ckpt=s1).path

    scores = {}
    for name, ck in (("E1", e1), ("E2", e2), ("E5", e5), ("S1", s1)):
        report = evaluate(ck, corpus["test"], with_stoi=cfg.with_stoi)
        report.write(out / "reports" / name)
        scores[name] = report.mean_si_sdri
    res = SeedResult(seed, gain, scores, time.time() - t0, cos)
    log.info("seed %d: %s", seed, res)
    return res


def run_matrix(cfg: MatrixConfig, root) -> MatrixReport:
    t0 = time.time()
    root = Path(root)
    corpus_dir = root / "corpus"
    bank = SourceBank.synthetic(seed=cfg.corpus_seed)
    if (corpus_dir / "test" / "manifest.jsonl").exists():
        corpus = {s: DatasetManifest.load(corpus_dir / s / "manifest.jsonl") for s in ("train", "dev", "test")}
    else:
        corpus = build_corpus(bank, corpus_dir, cfg.n_train, cfg.n_dev, cfg.n_test, seed=cfg.corpus_seed)
    report = MatrixReport(cfg)
    for seed in cfg.seeds:
        report.seeds.append(run_seed(cfg, seed, corpus, root, bank))
    report.seconds = time.time() - t0
    (root / "matrix.json").write_text(json.dumps(report.to_dict(), indent=2))
    (root / "matrix.txt").write_text(report.table() + "\n")
    return report


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Run the E1/E2/E5/S1 comparison over several seeds.")
    ap.add_argument("--root", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--denoiser-epochs", type=int, default=MatrixConfig.denoiser_epochs)
    ap.add_argument("--backbone-epochs", type=int, default=MatrixConfig.backbone_epochs)
    ap.add_argument("--finetune-epochs", type=int, default=MatrixConfig.finetune_epochs)
    ap.add_argument("--stoi", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = MatrixConfig(seeds=tuple(args.seeds), denoiser_epochs=args.denoiser_epochs,
                       backbone_epochs=args.backbone_epochs, finetune_epochs=args.finetune_epochs,
                       with_stoi=args.stoi)
    report = run_matrix(cfg, args.root)
    print(report.table())
    return 0 if all(r["status"] != "fail" for r in report.ordering()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
