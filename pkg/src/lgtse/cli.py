"""Command-line entry point: ``lgtse <subcommand> [--config file.json] [flags]``.

Every subcommand accepts a flat JSON config whose keys mirror the flag
names (dashes or underscores); explicit flags win over the file. Errors
exit with the category code of their exception class.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .augment import build_offline_dataset, select_strategy
from .data import SnrRanges, SourceBank, build_corpus
from .dsp import Waveform, read_wav, write_wav
from .errors import ConfigError, DataError, LgtseError
from .manifest import DatasetManifest
from .nets import BackboneConfig, DenoiserConfig, IdentityDenoiser
from .train import (
    Extractor,
    OracleDenoiser,
    TrainPlan,
    evaluate,
    export_guidance_figures,
    load_extractor,
    run_stage,
    write_stamp,
)

log = logging.getLogger("lgtse")

PLAN_KEYS = ("strategy", "lr0", "epochs", "batch_size", "grad_clip_l2", "seed", "segment_seconds", "dev_every")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict) or any(isinstance(v, dict) for v in raw.values()):
        raise ConfigError("config must be a flat key-value object")
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _merged(args) -> dict:
    """Config file values overridden by any flag the user actually passed."""
    cfg = _load_config(args.config)
    for k, v in vars(args).items():
        if k in ("config", "func", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def _sub_config(cls, cfg: dict, prefix: str):
    names = {f.name for f in fields(cls)}
    kw = {}
    for k, v in cfg.items():
        if k.startswith(prefix) and k[len(prefix):] in names:
            kw[k[len(prefix):]] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def _plan(cfg: dict, stage: str, **fixed) -> TrainPlan:
    kw = {k: cfg[k] for k in PLAN_KEYS if k in cfg}
    kw.update(fixed)
    return TrainPlan(stage=stage, **kw)


def _need(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _manifest(cfg, key):
    return DatasetManifest.load(cfg[key]) if cfg.get(key) else None


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict) -> int:
    _need(cfg, "root")
    seed = int(cfg.get("seed", 0))
    if cfg.get("source_dir"):
        bank = SourceBank.from_directory(cfg["source_dir"], cfg.get("noise_dir"),
                                         int(cfg.get("sample_rate", 8000)), seed)
    else:
        bank = SourceBank.synthetic(
            speakers_per_split=tuple(cfg.get("speakers", (12, 4, 4))),
            utterances_per_speaker=int(cfg.get("utterances", 8)),
            sample_rate=int(cfg.get("sample_rate", 8000)),
            seed=seed,
        )
    ranges = SnrRanges(tuple(cfg.get("snr_interferer", (-5.0, 5.0))), tuple(cfg.get("snr_noise", (-6.0, 3.0))))
    manifests = build_corpus(bank, cfg["root"], int(cfg.get("n_train", 240)), int(cfg.get("n_dev", 40)),
                             int(cfg.get("n_test", 40)), ranges, seed)
    write_stamp(cfg["root"], seed, cfg)
    for split, m in manifests.items():
        print(f"{split}: {len(m)} records -> {Path(cfg['root']) / split / 'manifest.jsonl'}")
    return 0


def cmd_pretrain_denoiser(cfg: dict) -> int:
    _need(cfg, "train", "out")
    plan = _plan(cfg, "pretrain_denoiser")
    ck = run_stage(plan, _manifest(cfg, "train"), _manifest(cfg, "dev"), cfg["out"],
                   denoiser_cfg=_sub_config(DenoiserConfig, cfg, "denoiser_"), resume=cfg.get("resume"))
    _report(ck)
    return 0


def cmd_pretrain_backbone(cfg: dict) -> int:
    _need(cfg, "train", "out")
    identity = bool(cfg.get("identity_denoiser", False))
    if not identity:
        _need(cfg, "denoiser")
    plan = _plan(cfg, "pretrain_backbone", identity_denoiser=identity, guidance=cfg.get("guidance", "denoised"))
    bb_cfg = _sub_config(BackboneConfig, cfg, "backbone_")
    if "backbone_in_channels" not in cfg:
        bb_cfg = BackboneConfig(**{**asdict(bb_cfg), "in_channels": select_strategy(plan.strategy).layout.channels})
    ck = run_stage(plan, _manifest(cfg, "train"), _manifest(cfg, "dev"), cfg["out"], backbone_cfg=bb_cfg,
                   denoiser_ckpt=cfg.get("denoiser"), resume=cfg.get("resume"))
    _report(ck)
    return 0


def cmd_finetune(cfg: dict) -> int:
    _need(cfg, "train", "out", "denoiser", "backbone")
    plan = _plan(cfg, "joint_finetune")
    ck = run_stage(plan, _manifest(cfg, "train"), _manifest(cfg, "dev"), cfg["out"],
                   denoiser_ckpt=cfg["denoiser"], backbone_ckpt=cfg["backbone"], resume=cfg.get("resume"))
    _report(ck)
    return 0


def cmd_build_offline(cfg: dict) -> int:
    _need(cfg, "manifest", "denoiser", "out")
    seed = int(cfg.get("seed", 0))
    den = load_extractor(cfg["denoiser"]).denoiser
    merged = build_offline_dataset(DatasetManifest.load(cfg["manifest"]), den, seed, cfg["out"],
                                   suffix=cfg.get("suffix", "_dn"))
    write_stamp(Path(cfg["out"]).parent, seed, cfg)
    print(f"merged manifest: {len(merged)} records -> {cfg['out']}")
    return 0


def cmd_extract(cfg: dict) -> int:
    _need(cfg, "checkpoint", "mixture", "enrollment", "out")
    ex = load_extractor(cfg["checkpoint"])
    if ex.backbone is None:
        raise ConfigError("checkpoint has no extraction backbone (stage-1 denoiser only)")
    mix = read_wav(cfg["mixture"])
    enroll = read_wav(cfg["enrollment"])
    y = ex.extract(mix.samples, enroll.samples)
    write_wav(cfg["out"], Waveform(y, mix.sample_rate))
    write_stamp(Path(cfg["out"]).parent, int(cfg.get("seed", 0)), cfg)
    print(f"wrote {cfg['out']}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    _need(cfg, "checkpoint", "manifest", "out")
    ex = load_extractor(cfg["checkpoint"])
    if ex.backbone is None:
        raise ConfigError("checkpoint has no extraction backbone (stage-1 denoiser only)")
    report = evaluate(ex, DatasetManifest.load(cfg["manifest"]), with_stoi=not cfg.get("no_stoi", False),
                      pesq_dir=cfg.get("pesq_dir"))
    stem = Path(cfg["out"])
    report.write(stem)
    write_stamp(stem.parent, int(cfg.get("seed", 0)), cfg)
    for k, v in report.summary().items():
        print(f"{k}={v}")
    return 0 if not report.failures else DataError.exit_code


def cmd_visualize_guidance(cfg: dict) -> int:
    _need(cfg, "mixture", "enrollment", "out")
    mix = read_wav(cfg["mixture"])
    enroll = read_wav(cfg["enrollment"])
    if cfg.get("oracle_clean"):
        clean = read_wav(cfg["oracle_clean"]).samples
        if clean.shape != mix.samples.shape:
            raise ConfigError("oracle clean signal must match the mixture length")
        den = OracleDenoiser(Extractor().compress(clean.float()[None]))
    elif cfg.get("checkpoint"):
        den = load_extractor(cfg["checkpoint"]).denoiser
    else:
        den = IdentityDenoiser()
    paths = export_guidance_figures(den, mix, enroll, cfg["out"])
    write_stamp(cfg["out"], int(cfg.get("seed", 0)), cfg)
    for p in sorted(paths.values()):
        print(p)
    return 0


def _report(ck):
    last = ck.history[-1] if ck.history else {}
    dev = last.get("dev_si_sdr")
    print(f"{ck.stage}: epoch {ck.epoch}, loss {last.get('loss', float('nan')):.3f}"
          + (f", dev SI-SDR {dev:.2f} dB" if dev is not None else "") + f" -> {ck.path}")


# --------------------------------------------------------------------------
# parser


def _add_plan_flags(p):
    p.add_argument("--train", help="training manifest (.jsonl)")
    p.add_argument("--dev", help="dev manifest for per-epoch SI-SDR")
    p.add_argument("--out", help="output directory for last.pt and stamp.json")
    p.add_argument("--strategy", choices=["base", "concat", "on_the_fly", "offline"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--grad-clip-l2", type=float)
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--dev-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint of the same stage to continue from")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lgtse", description="Noise-robust target speech extraction toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat JSON config; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "synthesize a 2-speaker + noise corpus")
    p.add_argument("--root")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-dev", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--speakers", type=int, nargs=3, metavar=("TRAIN", "DEV", "TEST"))
    p.add_argument("--utterances", type=int, help="utterances per synthetic speaker")
    p.add_argument("--snr-interferer", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--snr-noise", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--source-dir", help="real audio laid out as <split>/<speaker>/<utt>.wav")
    p.add_argument("--noise-dir")

    p = add("pretrain-denoiser", cmd_pretrain_denoiser, "stage 1: train the denoiser on noisy mixtures")
    _add_plan_flags(p)

    p = add("pretrain-backbone", cmd_pretrain_backbone, "train the extraction backbone with the denoiser frozen")
    _add_plan_flags(p)
    p.add_argument("--denoiser", help="stage-1 checkpoint")
    p.add_argument("--identity-denoiser", action="store_true", default=None,
                   help="baseline without a denoiser (guidance from the noisy mixture)")
    p.add_argument("--guidance", choices=["denoised", "noisy"])

    p = add("finetune", cmd_finetune, "stage 2: joint fine-tuning with both losses")
    _add_plan_flags(p)
    p.add_argument("--denoiser", help="stage-1 checkpoint")
    p.add_argument("--backbone", help="pretrain-backbone checkpoint")

    p = add("build-offline", cmd_build_offline, "denoise a corpus to disk and write the merged manifest")
    p.add_argument("--manifest")
    p.add_argument("--denoiser")
    p.add_argument("--out", help="merged manifest path")
    p.add_argument("--seed", type=int)
    p.add_argument("--suffix")

    p = add("extract", cmd_extract, "extract the target speaker from one mixture")
    p.add_argument("--checkpoint")
    p.add_argument("--mixture")
    p.add_argument("--enrollment")
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "SI-SDR / SI-SDRi / STOI over a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out", help="report stem; writes <stem>.txt and <stem>.jsonl")
    p.add_argument("--no-stoi", action="store_true", default=None)
    p.add_argument("--pesq-dir", help="where to write estimates for the external PESQ tool")

    p = add("visualize-guidance", cmd_visualize_guidance, "export the five guidance panels")
    p.add_argument("--checkpoint", help="denoiser source; identity when omitted")
    p.add_argument("--oracle-clean", help="use this clean mixture as a perfect denoiser")
    p.add_argument("--mixture")
    p.add_argument("--enrollment")
    p.add_argument("--out", help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(_merged(args))
    except LgtseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
