"""Batched torch counterparts of the pose algebra (differentiable)."""

from __future__ import annotations

import torch

EPS = 1e-6


def normalize_poses(poses: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Map (..., M, 2) poses so their enclosing box is the unit box."""
    lo = poses.min(dim=-2).values
    hi = poses.max(dim=-2).values
    size = torch.clamp(hi - lo, min=eps)
    return (poses - 0.5 * (lo + hi)[..., None, :]) / size[..., None, :]


def refine_poses(templates: torch.Tensor, offsets: torch.Tensor, scales: torch.Tensor):
    """Returns ``(normalize(T + offsets), normalize(T + offsets) * scales)``.

    ``templates`` (K, M, 2); ``offsets`` (B, K, 2M); ``scales`` (B, K, 2).
    """
    b, k, _ = offsets.shape
    norm = normalize_poses(templates[None] + offsets.reshape(b, k, -1, 2))
    return norm, norm * scales[..., None, :]
