"""Differentiable ROI resize (bilinear ROIAlign)."""

from __future__ import annotations

import torch
import torch.nn.functional as F

EPS = 1e-6


def roi_align(features: torch.Tensor, boxes: torch.Tensor, output_size: int, sampling: int = 2) -> torch.Tensor:
    """Resample box regions of ``features`` to ``output_size`` squares.

    ``features``: (B, C, H, W).  ``boxes``: (B, N, 4) as ``x0, y0, x1, y1`` in
    feature-map pixel units (pixel ``j`` spans ``[j, j + 1]``, y down).
    Each output bin averages ``sampling x sampling`` bilinear samples; samples
    outside the map read zero.  Gradients flow to both features and boxes.
    Returns (B * N, C, output_size, output_size).
    """
    b, c, h, w = features.shape
    n = boxes.shape[1]
    x0, y0, x1, y1 = boxes.unbind(-1)
    bw = torch.clamp(x1 - x0, min=EPS)
    bh = torch.clamp(y1 - y0, min=EPS)
    g = output_size * sampling
    steps = (torch.arange(g, dtype=features.dtype, device=features.device) + 0.5) / g
    xs = x0[..., None] + steps * bw[..., None]  # (B, N, g)
    ys = y0[..., None] + steps * bh[..., None]
    gx = (2 * xs / w - 1)[..., None, :].expand(b, n, g, g)
    gy = (2 * ys / h - 1)[..., :, None].expand(b, n, g, g)
    # all boxes of one image share a single sampling call: (B, C, N * g, g)
    grid = torch.stack([gx, gy], dim=-1).reshape(b, n * g, g, 2)
    out = F.grid_sample(features, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out = out.reshape(b, c, n, g, g).transpose(1, 2).reshape(b * n, c, g, g)
    return F.avg_pool2d(out, sampling) if sampling > 1 else out


def crop_boxes_to_feature(boxes: torch.Tensor, size: int) -> torch.Tensor:
    """Crop-frame boxes (y up, [-0.5, 0.5] spans the map) to feature pixels."""
    u0, v0, u1, v1 = boxes.unbind(-1)
    return torch.stack([(u0 + 0.5) * size, (0.5 - v1) * size, (u1 + 0.5) * size, (0.5 - v0) * size], dim=-1)


def scale_to_crop_boxes(scales: torch.Tensor) -> torch.Tensor:
    """Origin-centered boxes of width ``sx`` and height ``sy`` (crop units)."""
    half = 0.5 * scales
    return torch.cat([-half, half], dim=-1)


def roi_resize(features: torch.Tensor, crop_boxes: torch.Tensor, sampling: int = 2) -> torch.Tensor:
    """ROI resize of crop-frame boxes (B, N, 4) back to the feature size."""
    size = features.shape[-1]
    return roi_align(features, crop_boxes_to_feature(crop_boxes, size), size, sampling)
