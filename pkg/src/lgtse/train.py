"""Two-stage training, learning-rate schedule, evaluation and guidance export.

Stages run in order: ``pretrain_denoiser`` (enhancement loss only),
``pretrain_backbone`` (extraction loss, denoiser frozen) and
``joint_finetune`` (both losses, everything trainable).
"""
from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import __version__
from .augment import Strategy, make_onthefly_batch, select_strategy
from .dsp import (
    DrcConfig,
    StftConfig,
    Waveform,
    complex_mul,
    istft_tensor,
    power_law,
    read_wav,
    stft_tensor,
    write_wav,
)
from .errors import ConfigError, InvalidInput, LgtseError, TrainingDiverged
from .guidance import interact, stack_tensors
from .manifest import DatasetManifest
from .metrics import EvalReport, external_pesq, joint_loss, si_sdr, stoi
from .nets import (
    Backbone,
    BackboneConfig,
    Denoiser,
    DenoiserConfig,
    IdentityDenoiser,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain_denoiser", "pretrain_backbone", "joint_finetune")
STAGE_WEIGHTS = {
    "pretrain_denoiser": (1.0, 0.0),
    "pretrain_backbone": (0.0, 1.0),
    "joint_finetune": (1.0, 1.0),
}
DECAY_SLOW, DECAY_FAST = 0.98, 0.9
SLOW_PHASE_EPOCHS, FAST_PHASE_EPOCHS = 100, 20


@dataclass
class TrainPlan:
    stage: str = "pretrain_denoiser"
    strategy: str = "base"
    lr0: float = 5e-4
    epochs: int = 150
    batch_size: int = 8
    grad_clip_l2: float = 1.0
    seed: int = 0
    freeze_denoiser: bool | None = None
    identity_denoiser: bool = False  # SEF-PNet baseline: no denoiser at all
    guidance: str = "denoised"  # "noisy" interacts with the raw mixture instead
    segment_seconds: float = 1.0
    dev_every: int = 1
    strict_determinism: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        select_strategy(self.strategy)
        if self.guidance not in ("denoised", "noisy"):
            raise ConfigError("guidance must be 'denoised' or 'noisy'")
        required = {"pretrain_denoiser": False, "pretrain_backbone": True, "joint_finetune": False}[self.stage]
        if self.freeze_denoiser is None:
            self.freeze_denoiser = required
        elif self.freeze_denoiser != required:
            raise ConfigError(f"stage {self.stage} requires freeze_denoiser={required}")
        if self.identity_denoiser and self.stage != "pretrain_backbone":
            raise ConfigError("the identity-denoiser baseline only trains the backbone")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    @property
    def weights(self) -> tuple[float, float]:
        return STAGE_WEIGHTS[self.stage]


def lr_at_epoch(plan: TrainPlan, epoch: int) -> float:
    """x0.98 every two epochs up to epoch 100, flat afterwards, then x0.9 every two epochs over the last 20.

    When a run is shorter than 120 epochs the final-20 phase takes precedence.
    """
    if not 0 <= epoch < plan.epochs:
        raise InvalidInput(f"epoch {epoch} outside [0, {plan.epochs})")

    def slow(e):
        return plan.lr0 * DECAY_SLOW ** (min(e, SLOW_PHASE_EPOCHS) // 2)

    fast_start = max(plan.epochs - FAST_PHASE_EPOCHS, 0)
    if epoch < fast_start:
        return slow(epoch)
    return slow(fast_start) * DECAY_FAST ** ((epoch - fast_start) // 2)


# --------------------------------------------------------------------------
# model container


class Extractor(nn.Module):
    """Denoiser + guidance + backbone, wired according to a strategy."""

    def __init__(
        self,
        denoiser: nn.Module | None = None,
        backbone: Backbone | None = None,
        strategy: str = "base",
        guidance: str = "denoised",
        stft_cfg: StftConfig = StftConfig(),
        drc: DrcConfig = DrcConfig(),
    ):
        super().__init__()
        self.denoiser = denoiser if denoiser is not None else IdentityDenoiser()
        self.backbone = backbone
        self.strategy: Strategy = select_strategy(strategy)
        self.guidance = guidance
        self.stft_cfg = stft_cfg
        self.drc = drc

    def compress(self, x: torch.Tensor) -> torch.Tensor:
        return power_law(stft_tensor(x, self.stft_cfg), self.drc.beta)

    def synthesize(self, S: torch.Tensor, length: int) -> torch.Tensor:
        return istft_tensor(power_law(S, 1.0 / self.drc.beta), self.stft_cfg, length)

    def denoise(self, Y: torch.Tensor, frozen: bool) -> torch.Tensor:
        if frozen:
            with torch.no_grad():
                return self.denoiser(Y)
        return self.denoiser(Y)

    def guide(self, E, Y, Y_d):
        return interact(E, Y if self.guidance == "noisy" else Y_d)

    def forward(self, mix, enroll=None, frozen_denoiser=True, enlarge=None, need_y_d=True):
        """Returns a dict with the extraction estimate and the time-domain denoiser output.

        ``enlarge`` (default: the strategy's setting) appends denoised twins
        to the batch; targets for the twins are repeated by the caller.
        """
        L = mix.shape[-1]
        Y = self.compress(mix)
        out = {}
        Y_d = self.denoise(Y, frozen_denoiser)
        if need_y_d or self.backbone is None:
            out["y_d"] = self.synthesize(Y_d, L)
        if self.backbone is None:
            return out
        E = self.compress(enroll)
        enlarge = self.strategy.enlarge_batches if enlarge is None else enlarge
        if enlarge:
            tb = make_onthefly_batch(Y, E, torch.arange(len(Y)), lambda _: Y_d)
            spec, G = tb.specs(), tb.guidance()
            out["provenance"] = tb.provenance()
        else:
            spec, G = Y, self.guide(E, Y, Y_d)
        X = stack_tensors(spec, G, Y_d, self.strategy.layout)
        mask = self.backbone(X)
        out["y_hat"] = self.synthesize(complex_mul(mask, spec), L)
        out["guidance"] = G
        return out

    @torch.no_grad()
    def extract(self, mix: torch.Tensor, enroll: torch.Tensor) -> torch.Tensor:
        was = self.training
        self.eval()
        try:
            return self(mix.float()[None], enroll.float()[None], enlarge=False, need_y_d=False)["y_hat"][0]
        finally:
            self.train(was)

    @torch.no_grad()
    def enhance(self, mix: torch.Tensor) -> torch.Tensor:
        return self.synthesize(self.denoiser(self.compress(mix.float()[None])), mix.shape[-1])[0]


# --------------------------------------------------------------------------
# data


@dataclass
class Clip:
    id: str
    mix: torch.Tensor
    enroll: torch.Tensor
    target: torch.Tensor
    clean: torch.Tensor
    provenance: str


def load_clips(manifest: DatasetManifest) -> list[Clip]:
    clips = []
    for r in manifest:
        get = lambda key: read_wav(manifest.path(r, key)).samples.float()  # noqa: E731
        clips.append(Clip(r.id, get("mixture"), get("enrollment"), get("target"), get("clean_mix"), r.provenance))
    return clips


def iterate_batches(clips: list[Clip], plan: TrainPlan, epoch: int, sample_rate: int = 8000):
    """Seeded order and crops; each batch is cropped to a common length."""
    rng = np.random.default_rng([plan.seed, epoch, 1])
    order = rng.permutation(len(clips))
    seg = int(plan.segment_seconds * sample_rate)
    for start in range(0, len(order), plan.batch_size):
        batch = [clips[i] for i in order[start : start + plan.batch_size]]
        L = min(seg, *(len(c.mix) for c in batch))
        Le = min(len(c.enroll) for c in batch)
        offs = [int(rng.integers(0, len(c.mix) - L + 1)) for c in batch]
        crop = lambda attr: torch.stack([getattr(c, attr)[o : o + L] for c, o in zip(batch, offs)])  # noqa: E731
        yield {
            "mix": crop("mix"),
            "target": crop("target"),
            "clean": crop("clean"),
            "enroll": torch.stack([c.enroll[:Le] for c in batch]),
            "provenance": [c.provenance for c in batch],
        }


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    path: Path
    stage: str
    epoch: int
    lr: float
    configs: dict
    history: list[dict] = field(default_factory=list)
    plan: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        ck = load_checkpoint(path)
        return cls(Path(path), ck["stage"], ck["epoch"], ck["lr"], ck["configs"], ck.get("history", []), ck.get("plan", {}))

    def extractor(self) -> Extractor:
        return load_extractor(self.path)


def _configs(den_cfg, bb_cfg):
    return {
        "denoiser": asdict(den_cfg) if den_cfg is not None else None,
        "backbone": asdict(bb_cfg) if bb_cfg is not None else None,
    }


def load_extractor(path, strategy: str | None = None) -> Extractor:
    ck = load_checkpoint(path)
    plan = ck.get("plan", {})
    cfgs = ck["configs"]
    den = None
    if ck.get("denoiser_state") is not None and cfgs.get("denoiser"):
        den = Denoiser(DenoiserConfig(**cfgs["denoiser"]))
        den.load_state_dict(ck["denoiser_state"])
    bb = None
    if ck.get("backbone_state") is not None and cfgs.get("backbone"):
        bb = Backbone(BackboneConfig(**cfgs["backbone"]))
        bb.load_state_dict(ck["backbone_state"])
    ex = Extractor(den, bb, strategy or plan.get("strategy", "base"), plan.get("guidance", "denoised"))
    ex.eval()
    return ex


def revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_stamp(out_dir, seed: int, config: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {"seed": seed, "config_hash": config_hash(config), "revision": revision(), "config": config}
    p = out_dir / "stamp.json"
    p.write_text(json.dumps(stamp, indent=2, sort_keys=True, default=str))
    return p


# --------------------------------------------------------------------------
# training


def _grad_norm(params) -> float:
    sq = [p.grad.detach().double().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.sqrt(torch.stack(sq).sum())) if sq else 0.0


def _set_determinism(plan: TrainPlan):
    if plan.strict_determinism:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


@torch.no_grad()
def dev_si_sdr(model: Extractor, clips: list[Clip], stage: str) -> float:
    model.eval()
    vals = []
    for c in clips:
        if stage == "pretrain_denoiser":
            est, ref = model.enhance(c.mix), c.clean
        else:
            est, ref = model.extract(c.mix, c.enroll), c.target
        vals.append(float(si_sdr(est, ref)))
    model.train()
    return float(np.mean(vals)) if vals else float("nan")


def build_models(
    plan: TrainPlan,
    denoiser_cfg: DenoiserConfig | None,
    backbone_cfg: BackboneConfig | None,
    denoiser_ckpt=None,
    backbone_ckpt=None,
) -> Extractor:
    """Instantiate the stage's models, enforcing prerequisite checkpoints."""
    torch.manual_seed(plan.seed)
    strategy = select_strategy(plan.strategy)
    den: nn.Module | None = None
    bb = None
    if plan.stage == "pretrain_denoiser":
        den = Denoiser(denoiser_cfg or DenoiserConfig())
    else:
        if plan.identity_denoiser:
            den = None
        else:
            if denoiser_ckpt is None:
                raise ConfigError(f"stage {plan.stage} needs a pretrained denoiser checkpoint")
            dck = load_checkpoint(denoiser_ckpt)
            den = Denoiser(DenoiserConfig(**dck["configs"]["denoiser"]))
            den.load_state_dict(dck["denoiser_state"])
        if plan.stage == "joint_finetune":
            if backbone_ckpt is None:
                raise ConfigError("joint_finetune needs a pretrained backbone checkpoint")
            bck = load_checkpoint(backbone_ckpt)
            bb = Backbone(BackboneConfig(**bck["configs"]["backbone"]))
            bb.load_state_dict(bck["backbone_state"])
        else:
            cfg = backbone_cfg or BackboneConfig(in_channels=strategy.layout.channels)
            bb = Backbone(cfg)
        if bb.cfg.layout is not strategy.layout:
            raise ConfigError(f"backbone takes {bb.cfg.in_channels} channels but strategy {strategy.name} "
                              f"stacks {strategy.layout.channels}")
    guidance = "noisy" if plan.identity_denoiser and plan.guidance == "noisy" else plan.guidance
    return Extractor(den, bb, plan.strategy, guidance)


def run_stage(
    plan: TrainPlan,
    train: DatasetManifest | list[Clip],
    dev: DatasetManifest | list[Clip] | None,
    out_dir,
    denoiser_cfg: DenoiserConfig | None = None,
    backbone_cfg: BackboneConfig | None = None,
    denoiser_ckpt=None,
    backbone_ckpt=None,
    resume=None,
    max_epochs: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train one stage; writes ``<out_dir>/last.pt`` after every epoch and returns the final checkpoint.

    ``max_epochs`` stops early (for resume tests) without changing the schedule.
    """
    _set_determinism(plan)
    out_dir = Path(out_dir)
    model = build_models(plan, denoiser_cfg, backbone_cfg, denoiser_ckpt, backbone_ckpt)
    train_clips = train if isinstance(train, list) else load_clips(train)
    dev_clips = [] if dev is None else dev if isinstance(dev, list) else load_clips(dev)
    den_cfg = model.denoiser.cfg if isinstance(model.denoiser, Denoiser) else None
    bb_cfg = model.backbone.cfg if model.backbone is not None else None
    configs = _configs(den_cfg, bb_cfg)
    write_stamp(out_dir, plan.seed, {"plan": asdict(plan), **configs})

    frozen = plan.freeze_denoiser or plan.identity_denoiser
    model.denoiser.requires_grad_(not frozen)
    if frozen:
        model.denoiser.eval()
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigError("nothing to train in this stage")
    opt = torch.optim.Adam(params, lr=plan.lr0)
    start, history = 0, []
    if resume is not None:
        ck = load_checkpoint(resume, expect={})
        if ck["stage"] != plan.stage:
            raise ConfigError(f"resume checkpoint is from stage {ck['stage']}")
        _load_states(model, ck)
        opt.load_state_dict(ck["optimizer_state"])
        start, history = ck["epoch"], ck.get("history", [])

    w = plan.weights
    stop = plan.epochs if max_epochs is None else min(plan.epochs, start + max_epochs)
    path = out_dir / "last.pt"
    for epoch in range(start, stop):
        lr = lr_at_epoch(plan, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        if frozen:
            model.denoiser.eval()
        sums = np.zeros(3)
        n_steps, max_post = 0, 0.0
        for b_idx, batch in enumerate(iterate_batches(train_clips, plan, epoch)):
            out = model(batch["mix"], batch["enroll"], frozen_denoiser=frozen, need_y_d=w[0] != 0)
            if model.backbone is None:
                loss = joint_loss(out["y_d"], batch["clean"], None, None, w)
            else:
                tgt = batch["target"]
                if "provenance" in out:
                    tgt = torch.cat([tgt, tgt])
                y_d = out.get("y_d")
                clean = None if w[0] == 0 else batch["clean"]
                loss = joint_loss(y_d, clean, out["y_hat"], tgt, w)
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(epoch, b_idx)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            pre = float(torch.nn.utils.clip_grad_norm_(params, plan.grad_clip_l2))
            post = _grad_norm(params)
            opt.step()
            max_post = max(max_post, post)
            sums += [float(v) for v in loss.item().values()]
            n_steps += 1
            if on_step is not None:
                on_step({"epoch": epoch, "batch": b_idx, "pre_clip": pre, "post_clip": post, "loss": loss.item()["total"]})
        rec = {
            "epoch": epoch,
            "lr": lr,
            "steps": n_steps,
            "loss": float(sums[0]) / max(n_steps, 1),
            "denoiser_term": float(sums[1]) / max(n_steps, 1),
            "backbone_term": float(sums[2]) / max(n_steps, 1),
            "max_post_clip_norm": max_post,
        }
        if dev_clips and ((epoch + 1) % plan.dev_every == 0 or epoch + 1 == plan.epochs):
            rec["dev_si_sdr"] = dev_si_sdr(model, dev_clips, plan.stage)
        history.append(rec)
        log.info("%s epoch %d: %s", plan.stage, epoch, rec)
        save_checkpoint(path, {
            "stage": plan.stage,
            "plan": asdict(plan),
            "configs": configs,
            "denoiser_state": model.denoiser.state_dict() if den_cfg is not None else None,
            "backbone_state": model.backbone.state_dict() if bb_cfg is not None else None,
            "optimizer_state": opt.state_dict(),
            "epoch": epoch + 1,
            "lr": lr,
            "history": history,
            "seed": plan.seed,
        })
    return Checkpoint.load(path)


def _load_states(model: Extractor, ck: dict):
    if ck.get("denoiser_state") is not None:
        model.denoiser.load_state_dict(ck["denoiser_state"])
    if ck.get("backbone_state") is not None and model.backbone is not None:
        model.backbone.load_state_dict(ck["backbone_state"])


# --------------------------------------------------------------------------
# evaluation


def evaluate(pipeline, manifest: DatasetManifest, with_stoi: bool = True, pesq_dir=None) -> EvalReport:
    """Score ``pipeline(mixture, enrollment) -> estimate`` on every record of ``manifest``.

    ``pipeline`` may also be an Extractor or a checkpoint path. Per-record
    failures are collected and evaluation carries on.
    """
    if isinstance(pipeline, (str, Path)):
        pipeline = load_extractor(pipeline)
    fn = pipeline.extract if isinstance(pipeline, Extractor) else pipeline
    report = EvalReport()
    for r in manifest:
        try:
            mix_w = read_wav(manifest.path(r, "mixture"))
            mix = mix_w.samples
            enroll = read_wav(manifest.path(r, "enrollment")).samples
            target = read_wav(manifest.path(r, "target")).samples
            est = torch.as_tensor(fn(mix, enroll)).reshape(-1).float()
            row = {
                "id": r.id,
                "si_sdr": float(si_sdr(est, target)),
                "si_sdr_mix": float(si_sdr(mix, target)),
            }
            row["si_sdri"] = row["si_sdr"] - row["si_sdr_mix"]
            row["stoi"] = stoi(est, target, mix_w.sample_rate) if with_stoi else None
            row["pesq"] = None
            if pesq_dir is not None:
                p = Path(pesq_dir) / f"{r.id}.wav"
                write_wav(p, Waveform(est, mix_w.sample_rate))
                row["pesq"] = external_pesq(manifest.path(r, "target"), p, mix_w.sample_rate)
            report.records.append(row)
        except (LgtseError, OSError) as exc:
            report.failures.append({"id": r.id, "error": str(exc)})
    return report


# --------------------------------------------------------------------------
# guidance visualisation

PANELS = ("enrollment", "noisy", "denoised", "guidance_noisy", "guidance_denoised")


class OracleDenoiser(nn.Module):
    """Ignores its input and returns a fixed (clean) compressed spectrum."""

    def __init__(self, clean_spec: torch.Tensor):
        super().__init__()
        self.register_buffer("clean", clean_spec)

    def forward(self, Y):
        return self.clean.expand_as(Y)


def guidance_arrays(denoiser, mixture: torch.Tensor, enrollment: torch.Tensor,
                    stft_cfg: StftConfig = StftConfig(), drc: DrcConfig = DrcConfig()) -> dict[str, np.ndarray]:
    ex = Extractor(denoiser, None, stft_cfg=stft_cfg, drc=drc)
    ex.eval()
    with torch.no_grad():
        Y = ex.compress(mixture.float()[None])
        E = ex.compress(enrollment.float()[None])
        Y_d = ex.denoiser(Y)
        arrays = {
            "enrollment": E[0],
            "noisy": Y[0],
            "denoised": Y_d[0],
            "guidance_noisy": interact(E, Y)[0],
            "guidance_denoised": interact(E, Y_d)[0],
        }
    return {k: v.numpy() for k, v in arrays.items()}


def log_magnitude_db(stacked: np.ndarray, floor_db: float = -80.0) -> np.ndarray:
    F = stacked.shape[0] // 2
    mag = np.sqrt(stacked[:F] ** 2 + stacked[F:] ** 2)
    return np.maximum(20 * np.log10(mag + 1e-12), floor_db)


def export_guidance_figures(denoiser, mixture, enrollment, out_dir) -> dict[str, Path]:
    """Write five log-magnitude panels (PNG) and their raw arrays (NPY)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(mixture, Waveform):
        mixture = mixture.samples
    if isinstance(enrollment, Waveform):
        enrollment = enrollment.samples
    if isinstance(denoiser, (str, Path)):
        denoiser = load_extractor(denoiser).denoiser
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = guidance_arrays(denoiser, mixture, enrollment)
    paths = {}
    for name in PANELS:
        np.save(out_dir / f"{name}.npy", arrays[name])
        paths[f"{name}.npy"] = out_dir / f"{name}.npy"
        fig, ax = plt.subplots(figsize=(5, 3))
        im = ax.imshow(log_magnitude_db(arrays[name]), origin="lower", aspect="auto", cmap="magma")
        ax.set_title(name.replace("_", " "))
        ax.set_xlabel("frame")
        ax.set_ylabel("bin")
        fig.colorbar(im, ax=ax, label="dB")
        fig.tight_layout()
        fig.savefig(out_dir / f"{name}.png", dpi=80)
        plt.close(fig)
        paths[f"{name}.png"] = out_dir / f"{name}.png"
    return paths


def plan_from_dict(d: dict) -> TrainPlan:
    names = {f.name for f in fields(TrainPlan)}
    return TrainPlan(**{k: v for k, v in d.items() if k in names})
