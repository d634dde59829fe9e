"""Learnable networks: the template pose model, its distillation teacher, the
adversarial discriminator and the two direct-prediction baselines."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import SceneEncoder, make_backbone
from .heatmaps import decode_heatmaps
from .layers import MLP, DecoderLayer, sine_position_encoding
from .poseops import refine_poses
from .roi import roi_resize, scale_to_crop_boxes


@dataclass
class ModelOutput:
    feature_map: torch.Tensor  # (B, C, Hf, Wf)
    pooled: torch.Tensor  # (B, C)
    scores: torch.Tensor  # (B, K) in (0, 1)
    scale_embed: torch.Tensor  # (B, K, d)
    scales: torch.Tensor  # (B, K, 2) in [0, 2]
    offset_embed: torch.Tensor  # (B, K, d)
    offsets: torch.Tensor  # (B, K, 2M) in [-0.5, 0.5]
    norm_poses: torch.Tensor  # (B, K, M, 2) normalize(T + offsets)
    poses: torch.Tensor  # (B, K, M, 2) crop frame


class TemplatePoseNet(nn.Module):
    """Scene encoder + classifier, scale decoder over template queries, and a
    per-template offset decoder reading the ROI-resized feature map."""

    def __init__(self, cfg, templates):
        super().__init__()
        self.cfg = cfg
        templates = torch.as_tensor(templates, dtype=torch.float32).reshape(-1, cfg.num_keypoints, 2)
        k, c, d, s = len(templates), cfg.channels, cfg.embed_dim, cfg.feature_size
        self.register_buffer("templates", templates)
        self.encoder = SceneEncoder(cfg, s)
        self.fuse = nn.Conv2d(3 * c, c, 1)
        self.classifier = nn.Linear(c, k)
        self.scale_proj = nn.Conv2d(c, d, 1)
        self.offset_proj = nn.Conv2d(c, d, 1)
        self.register_buffer("pos", sine_position_encoding(s, s, d))
        self.queries = nn.Embedding(k, d)
        self.scale_decoder = nn.ModuleList(
            DecoderLayer(d, cfg.num_heads, cfg.ffn_dim, cfg.query_self_attention) for _ in range(cfg.scale_layers)
        )
        self.scale_head = MLP(d, cfg.mlp_hidden, 2)
        # per-template decoding: no attention across templates
        self.offset_decoder = nn.ModuleList(
            DecoderLayer(d, cfg.num_heads, cfg.ffn_dim, self_attention=False) for _ in range(cfg.offset_layers)
        )
        self.offset_head = MLP(d, cfg.mlp_hidden, 2 * cfg.num_keypoints)

    @property
    def num_templates(self) -> int:
        return self.templates.shape[0]

    def backbone_parameters(self):
        return self.encoder.backbone.parameters()

    def foundation(self, crops):
        fmap = self.fuse(self.encoder(crops))
        pooled = fmap.mean(dim=(-2, -1))
        return fmap, pooled, torch.sigmoid(self.classifier(pooled))

    def _memory(self, proj, fmap):
        return proj(fmap).flatten(2).transpose(1, 2)

    def scale_decode(self, fmap, queries=None):
        q = self.queries.weight if queries is None else queries
        tgt = q[None].expand(fmap.shape[0], -1, -1)
        memory = self._memory(self.scale_proj, fmap)
        for layer in self.scale_decoder:
            tgt = layer(tgt, memory, self.pos)
        return tgt, 2.0 * torch.sigmoid(self.scale_head(tgt))

    def roi_maps(self, fmap, scales):
        return roi_resize(fmap, scale_to_crop_boxes(scales), self.cfg.roi_sampling)

    def offset_decode(self, embed, roi_maps):
        b, k, d = embed.shape
        tgt = embed.reshape(b * k, 1, d)
        memory = self._memory(self.offset_proj, roi_maps)
        for layer in self.offset_decoder:
            tgt = layer(tgt, memory, self.pos)
        tgt = tgt.reshape(b, k, d)
        return tgt, 0.5 * torch.tanh(self.offset_head(tgt))

    def forward(self, crops, queries=None) -> ModelOutput:
        fmap, pooled, scores = self.foundation(crops)
        u, scales = self.scale_decode(fmap, queries)
        u_prime, offsets = self.offset_decode(u, self.roi_maps(fmap, scales))
        norm, poses = refine_poses(self.templates, offsets, scales)
        return ModelOutput(fmap, pooled, scores, u, scales, u_prime, offsets, norm, poses)


class Teacher(nn.Module):
    """Offset regressor fed the scene crop plus template keypoint heatmaps."""

    def __init__(self, cfg):
        super().__init__()
        m = cfg.num_keypoints
        self.backbone = make_backbone(cfg.backbone, 3 + m, cfg.backbone_widths)
        self.embed = nn.Sequential(
            nn.Linear(self.backbone.widths[-1], cfg.mlp_hidden), nn.ReLU(), nn.Linear(cfg.mlp_hidden, cfg.embed_dim),
            nn.LayerNorm(cfg.embed_dim),  # same scale as the decoder embedding it supervises
        )
        self.head = nn.Linear(cfg.embed_dim, 2 * m)

    def forward(self, image, heatmaps):
        """``image`` (B, 3, S, S), ``heatmaps`` (B, M, S, S) -> (v, offsets)."""
        x = torch.cat([image - 0.5, heatmaps], dim=1)
        v = self.embed(self.backbone(x)[-1].mean(dim=(-2, -1)))
        return v, 0.5 * torch.tanh(self.head(v))


class Discriminator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.in_dim = 2 * cfg.num_keypoints + 2 + cfg.channels
        self.net = MLP(self.in_dim, cfg.disc_hidden, 1)

    def forward(self, q):
        if q.shape[-1] != self.in_dim:
            raise ValueError(f"discriminator expects {self.in_dim}-dim inputs, got {q.shape[-1]}")
        return torch.sigmoid(self.net(q)).squeeze(-1)


def discriminator_input(norm_poses, scales, pooled):
    """Concatenate normalized refined pose, scale and pooled scene feature.

    ``norm_poses`` (B, K, M, 2), ``scales`` (B, K, 2), ``pooled`` (B, C).
    """
    b, k = scales.shape[:2]
    return torch.cat([norm_poses.reshape(b, k, -1), scales, pooled[:, None].expand(b, k, -1)], dim=-1)


HEATMAP_SIZE = 56


class HeatmapBaseline(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = SceneEncoder(cfg, HEATMAP_SIZE)
        self.head = nn.Conv2d(3 * cfg.channels, cfg.num_keypoints, 1)

    def backbone_parameters(self):
        return self.encoder.backbone.parameters()

    def forward(self, crops):
        return self.head(self.encoder(crops))

    def predict_poses(self, crops):
        return decode_heatmaps(self(crops))


class RegressionBaseline(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        # same foundation resolution as the template model; the head only pools it
        self.encoder = SceneEncoder(cfg, cfg.feature_size)
        self.fc = nn.Linear(3 * cfg.channels, 2 * cfg.num_keypoints)

    def backbone_parameters(self):
        return self.encoder.backbone.parameters()

    def forward(self, crops):
        return self.fc(self.encoder(crops).mean(dim=(-2, -1)))

    def predict_poses(self, crops):
        return self(crops).reshape(crops.shape[0], -1, 2)
