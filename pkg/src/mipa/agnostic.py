"""Patch-wise modality-agnostic module.

A gradient reversal gate sits between the stage-1 encoder tokens and a
per-location linear modality classifier. The classifier learns to predict
which modality supplied each patch; the reversed gradient pushes the
encoder the other way.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

BCE_EPS = 1e-7


def lambda_schedule(gamma: float, s: float) -> float:
    """Reversal weight ``2 / (1 + exp(-gamma * s)) - 1`` for progress ``s`` in [0, 1]."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return 2.0 / (1.0 + math.exp(-gamma * s)) - 1.0


@dataclass
class GrlGate:
    lambda_ma: float = 0.0
    gamma: float = 0.1
    step_fraction: float = 0.0

    def update(self, step_fraction: float) -> float:
        self.step_fraction = min(max(float(step_fraction), 0.0), 1.0)
        self.lambda_ma = lambda_schedule(self.gamma, self.step_fraction)
        return self.lambda_ma


class _GradientReversal(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x, lambda_ma):
        ctx.lambda_ma = lambda_ma
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward_contract(grad_output, ctx.lambda_ma), None


def grl_backward_contract(upstream_grad: torch.Tensor, gate) -> torch.Tensor:
    lambda_ma = gate.lambda_ma if isinstance(gate, GrlGate) else float(gate)
    return upstream_grad.neg() * lambda_ma


def grl_forward(features: torch.Tensor, gate) -> torch.Tensor:
    """Identity on values; gradients come back multiplied by ``-lambda_ma``."""
    lambda_ma = gate.lambda_ma if isinstance(gate, GrlGate) else float(gate)
    return _GradientReversal.apply(features, lambda_ma)


@dataclass
class ModalityMapPrediction:
    logits: torch.Tensor  # (..., h, w)

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class ModalityClassifier(nn.Module):
    """One logit per stage-1 token from a shared linear projection."""

    def __init__(self, embed_dim: int, zero_init: bool = False):
        super().__init__()
        self.embed_dim = embed_dim
        self.proj = nn.Linear(embed_dim, 1)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, tokens: torch.Tensor) -> ModalityMapPrediction:
        if tokens.shape[-1] != self.embed_dim:
            raise ValueError(f"expected stage-1 tokens with {self.embed_dim} channels, "
                             f"got shape {tuple(tokens.shape)}")
        return ModalityMapPrediction(logits=self.proj(tokens).squeeze(-1))


def modality_classifier(stage_features: torch.Tensor, classifier: ModalityClassifier,
                        gate=None) -> ModalityMapPrediction:
    if gate is not None:
        stage_features = grl_forward(stage_features, gate)
    return classifier(stage_features)


def pool_modality_map(modality_map: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Downsample a binary ``(..., H, W)`` map by strict majority; ties go to 1 (IR)."""
    h, w = modality_map.shape[-2:]
    if (h, w) == (out_h, out_w):
        return modality_map.to(torch.float32)
    if h % out_h or w % out_w:
        raise ValueError(f"cannot pool a {h}x{w} map to {out_h}x{out_w}")
    kh, kw = h // out_h, w // out_w
    lead = modality_map.shape[:-2]
    cells = modality_map.to(torch.float32).reshape(*lead, out_h, kh, out_w, kw)
    ones = cells.sum(dim=(-3, -1))
    return (2 * ones >= kh * kw).to(torch.float32)


def modality_bce(prediction, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy between predicted and target modality maps.

    ``prediction`` is a ``ModalityMapPrediction`` or a tensor of probabilities.
    """
    probs = prediction.probabilities if isinstance(prediction, ModalityMapPrediction) else prediction
    if probs.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(probs.shape)} != target shape {tuple(target.shape)}")
    probs = probs.clamp(eps, 1.0 - eps)
    target = target.to(probs.dtype)
    return F.binary_cross_entropy(probs, target, reduction="mean")


def total_loss(l_det, l_ma, lambda_ma):
    values = [float(v) for v in (l_det, l_ma, lambda_ma)]
    if not all(math.isfinite(v) for v in values):
        raise FloatingPointError(f"non-finite loss terms l_det={values[0]} l_ma={values[1]} "
                                 f"lambda={values[2]}")
    return l_det + lambda_ma * l_ma
