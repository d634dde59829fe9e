"""Gaussian keypoint heatmaps in the scene-crop frame."""

from __future__ import annotations

import numpy as np
import torch

from .poseops import normalize_poses


def crop_to_raster(points: torch.Tensor, size: int) -> torch.Tensor:
    """Crop-frame (u, v) -> continuous raster (x, y) of a size x size map."""
    return torch.stack([(points[..., 0] + 0.5) * size, (0.5 - points[..., 1]) * size], dim=-1)


def gaussian_heatmaps(points: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    """One Gaussian channel per keypoint.

    ``points``: (..., M, 2) in the crop frame.  Keypoints outside the raster
    give all-zero channels.  Returns (..., M, size, size).
    """
    xy = crop_to_raster(points, size)
    centers = torch.arange(size, dtype=points.dtype, device=points.device) + 0.5
    dx = centers - xy[..., 0:1]  # (..., M, size)
    dy = centers - xy[..., 1:2]
    gx = torch.exp(-0.5 * (dx / sigma) ** 2)
    gy = torch.exp(-0.5 * (dy / sigma) ** 2)
    maps = gy[..., :, None] * gx[..., None, :]
    inside = (xy[..., 0] >= 0) & (xy[..., 0] < size) & (xy[..., 1] >= 0) & (xy[..., 1] < size)
    return maps * inside[..., None, None].to(maps.dtype)


def render_heatmaps_t(templates: torch.Tensor, scales: torch.Tensor, size: int, sigma_224: float = 2.0) -> torch.Tensor:
    """Templates (B, M, 2) fitted into origin-centered boxes of ``scales`` (B, 2)."""
    pts = normalize_poses(templates) * scales[..., None, :]
    return gaussian_heatmaps(pts, size, sigma_224 * size / 224.0)


def render_heatmaps(template, scale, size: int = 224, sigma_224: float = 2.0) -> np.ndarray:
    """(M, size, size) heatmaps of ``template`` fitted to ``scale``."""
    t = torch.as_tensor(np.asarray(template, dtype=np.float64)).reshape(1, -1, 2)
    s = torch.as_tensor(np.asarray(scale, dtype=np.float64)).reshape(1, 2)
    return render_heatmaps_t(t, s, size, sigma_224)[0].numpy()


def decode_heatmaps(maps: torch.Tensor) -> torch.Tensor:
    """Per-channel argmax -> crop-frame keypoints at pixel centers.  (..., M, S, S) -> (..., M, 2)."""
    size = maps.shape[-1]
    flat = maps.flatten(-2).argmax(-1)
    row = torch.div(flat, size, rounding_mode="floor").to(maps.dtype)
    col = (flat % size).to(maps.dtype)
    return torch.stack([(col + 0.5) / size - 0.5, 0.5 - (row + 0.5) / size], dim=-1)
