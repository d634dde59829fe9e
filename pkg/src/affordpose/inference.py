"""Run trained models over samples and express the poses in pixel coordinates."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .evaluation import SamplePrediction
from .model import TemplatePoseNet
from .scene import SceneSample, crop_batch, to_pixel_frame


def _batched(samples: Sequence[SceneSample], batch_size: int):
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        groups: dict[tuple, list[int]] = {}
        for i, s in enumerate(chunk):
            groups.setdefault(s.image.shape, []).append(i)
        for idx in groups.values():
            part = [chunk[i] for i in idx]
            images = torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in part])).float()
            targets = torch.tensor([s.target for s in part], dtype=torch.float32)
            yield part, images, targets


@torch.no_grad()
def predict(model, samples: Sequence[SceneSample], batch_size: int = 32) -> list[SamplePrediction]:
    """Per-sample scores and K candidate poses (pixel frame).

    Direct-prediction baselines yield one pose with score 1.
    """
    model.eval()
    size = model.cfg.input_size
    dtype = next(model.parameters()).dtype
    out: list[SamplePrediction] = []
    for part, images, targets in _batched(list(samples), batch_size):
        crops = crop_batch(images, targets, size).to(dtype)
        if isinstance(model, TemplatePoseNet):
            res = model(crops)
            scores = res.scores.double().numpy()
            poses = res.poses.double().numpy()
        else:
            poses = model.predict_poses(crops).double().numpy()[:, None]
            scores = np.ones((len(part), 1))
        for s, sc, ps in zip(part, scores, poses):
            pix = np.stack([to_pixel_frame(p, s.target, s.height) for p in ps])
            out.append(SamplePrediction(s.sample_id, sc, pix))
    return out
