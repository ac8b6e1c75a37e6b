"""Enrollment-mixture context interaction and backbone input stacking.

The interaction is a parameter-free cross attention: every mixture frame
attends over enrollment frames, and the guidance column for that frame is
the attention-weighted sum of enrollment columns. Running it against a
denoised mixture keeps noise out of the weights.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import torch

from .dsp import ComplexSpec
from .errors import InvalidInput, ShapeError


class GuidanceSource(str, enum.Enum):
    NOISY = "noisy_interaction"
    DENOISED = "denoised_interaction"
    ORACLE_CLEAN = "oracle_clean_interaction"


class Layout(str, enum.Enum):
    BASE = "base_concat"
    DISTORTION = "distortion_concat"

    @property
    def channels(self) -> int:
        return 4 if self is Layout.BASE else 6


CHANNEL_MAP = {
    Layout.BASE: ("Y_re", "Y_im", "G_re", "G_im"),
    Layout.DISTORTION: ("Y_re", "Y_im", "Yd_re", "Yd_im", "G_re", "G_im"),
}


@dataclass
class GuidanceFeature:
    data: torch.Tensor  # (..., 2F, T_y)
    source: GuidanceSource
    weights: torch.Tensor | None = None  # (..., T_e, T_y) attention, kept for inspection


@dataclass
class StackedInput:
    data: torch.Tensor  # (..., C, F, T)
    layout: Layout

    @property
    def channel_map(self):
        return CHANNEL_MAP[self.layout]


def interaction_weights(E: torch.Tensor, Y: torch.Tensor, scale: bool = False) -> torch.Tensor:
    """softmax over enrollment frames of E^T Y; (..., 2F, Te) x (..., 2F, Ty) -> (..., Te, Ty)."""
    logits = torch.matmul(E.transpose(-1, -2), Y)
    if scale:
        logits = logits / math.sqrt(E.shape[-2])
    return torch.softmax(logits, dim=-2)


def interact(E: torch.Tensor, Y: torch.Tensor, scale: bool = False) -> torch.Tensor:
    """Tensor kernel of the interaction: E x softmax(E^T Y)."""
    return torch.matmul(E, interaction_weights(E, Y, scale))


def context_interaction(
    E: ComplexSpec,
    Y: ComplexSpec,
    source: GuidanceSource = GuidanceSource.NOISY,
    scale: bool = False,
) -> GuidanceFeature:
    if E.data.shape[-2] != Y.data.shape[-2]:
        raise ShapeError(f"enrollment has {E.data.shape[-2]} rows, mixture has {Y.data.shape[-2]}")
    if E.config != Y.config or E.compressed != Y.compressed:
        raise InvalidInput("enrollment and mixture must share STFT config and compression state")
    if not (torch.isfinite(E.data).all() and torch.isfinite(Y.data).all()):
        raise InvalidInput("non-finite input to context interaction")
    A = interaction_weights(E.data, Y.data, scale)
    return GuidanceFeature(torch.matmul(E.data, A), GuidanceSource(source), A)


def noise_agnostic_guidance(
    E: ComplexSpec,
    Y: ComplexSpec,
    denoiser: Callable[[ComplexSpec], ComplexSpec],
    scale: bool = False,
) -> tuple[GuidanceFeature, ComplexSpec]:
    Y_d = denoiser(Y)
    if Y_d.data.shape != Y.data.shape:
        raise ShapeError(f"denoiser changed shape {tuple(Y.data.shape)} -> {tuple(Y_d.data.shape)}")
    return context_interaction(E, Y_d, GuidanceSource.DENOISED, scale), Y_d


def stack_tensors(Y: torch.Tensor, G: torch.Tensor, Y_d: torch.Tensor | None, layout: Layout) -> torch.Tensor:
    """(..., 2F, T) pieces -> (..., C, F, T)."""
    F = Y.shape[-2] // 2
    parts = [Y[..., :F, :], Y[..., F:, :]]
    if layout is Layout.DISTORTION:
        parts += [Y_d[..., :F, :], Y_d[..., F:, :]]
    parts += [G[..., :F, :], G[..., F:, :]]
    return torch.stack(parts, dim=-3)


def stack_features(
    Y: ComplexSpec,
    G: GuidanceFeature,
    Y_d: ComplexSpec | None = None,
    layout: Layout | str = Layout.BASE,
) -> StackedInput:
    layout = Layout(layout)
    if layout is Layout.DISTORTION and Y_d is None:
        raise InvalidInput("distortion_concat needs the denoised spectrum")
    shapes = {tuple(Y.data.shape), tuple(G.data.shape)}
    if layout is Layout.DISTORTION:
        shapes.add(tuple(Y_d.data.shape))
    if len(shapes) != 1:
        raise ShapeError(f"inputs disagree in shape: {sorted(shapes)}")
    return StackedInput(stack_tensors(Y.data, G.data, Y_d.data if Y_d is not None else None, layout), layout)
