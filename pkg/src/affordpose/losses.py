"""Training objectives.  Every function takes batched torch tensors and
returns a scalar averaged over the batch dimension."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .config import LossWeights
from .model.poseops import normalize_poses

PROB_EPS = 1e-7


def _clip(p: torch.Tensor) -> torch.Tensor:
    return torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def loss_cls(scores: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Template-wise binary cross-entropy, positive term scaled by ``weights``.

    ``scores``/``labels``: (..., K); ``weights``: (K,).  Mean over templates,
    then over any leading batch dimensions.
    """
    c = _clip(scores)
    l = labels.to(c.dtype)
    w = torch.ones_like(c) if weights is None else weights.to(c.dtype)
    bce = -(w * l * torch.log(c) + (1 - l) * torch.log(1 - c))
    return bce.mean(dim=-1).mean()


def class_weights(labels) -> np.ndarray:
    """``N_neg / N_pos`` per template over an (N, K) label matrix (1 if no positives)."""
    lab = np.asarray(labels, dtype=np.float64)
    pos = lab.sum(0)
    neg = len(lab) - pos
    return np.where(pos > 0, neg / np.maximum(pos, 1), 1.0)


def loss_offset(offsets: torch.Tensor, template: torch.Tensor, gt_pose: torch.Tensor) -> torch.Tensor:
    """``|| N(T + offsets) - N(P*) ||^2`` summed over the 2M coordinates.

    ``offsets`` (..., 2M); ``template``/``gt_pose`` (..., M, 2).
    """
    refined = normalize_poses(template + offsets.reshape(*offsets.shape[:-1], -1, 2))
    return offset_error(refined, normalize_poses(gt_pose))


def offset_error(norm_pred: torch.Tensor, norm_gt: torch.Tensor) -> torch.Tensor:
    return ((norm_pred - norm_gt) ** 2).flatten(-2).sum(-1).mean()


def loss_scale(scale: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((scale - target) ** 2).sum(-1).mean()


def loss_dis(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Squared L2 to the teacher's feature; the teacher side gets no gradient."""
    return ((student - teacher.detach()) ** 2).sum(-1).mean()


@dataclass
class AdversarialTerms:
    generator: torch.Tensor  # minimized by the pose model (non-saturating)
    discriminator: torch.Tensor  # minimized by the discriminator (= -value)
    value: torch.Tensor  # log D(Q_gt) + log(1 - D(Q_other)) expectation


def loss_adv(d_gt: torch.Tensor, d_others: torch.Tensor, mask: torch.Tensor | None = None) -> AdversarialTerms:
    """Adversarial terms from discriminator outputs.

    ``d_gt`` (B,) are outputs on ground-truth-template inputs, ``d_others``
    (B, K) on other templates, ``mask`` (B, K) selects the extra positives.
    Expectations run over all selected (sample, template) pairs; with no
    extra positives only the ground-truth part remains.
    """
    real = torch.log(_clip(d_gt)).mean()
    if mask is None:
        mask = torch.ones_like(d_others, dtype=torch.bool)
    mask = mask.to(torch.bool)
    if d_others.numel() == 0 or not bool(mask.any()):
        zero = d_gt.sum() * 0.0
        return AdversarialTerms(zero, -real, real)
    fake = _clip(d_others[mask])
    value = real + torch.log(1 - fake).mean()
    return AdversarialTerms(-torch.log(fake).mean(), -value, value)


def total_loss(parts: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """``cls + l_o * offset + l_s * scale + l_adv * adv + l_dis * dis``; missing parts count as 0."""
    return (
        parts.get("cls", 0.0)
        + weights.lambda_offset * parts.get("offset", 0.0)
        + weights.lambda_scale * parts.get("scale", 0.0)
        + weights.lambda_adv * parts.get("adv", 0.0)
        + weights.lambda_dis * parts.get("dis", 0.0)
    )
