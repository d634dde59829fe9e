"""PNG rendering of scenes and pose overlays."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .pose import BONES, as_pose
from .scene import SceneSample

# one color per rank; the top pose is drawn last so it stays on top
RANK_COLORS = ((255, 40, 40), (40, 200, 255), (255, 220, 0), (160, 90, 255), (80, 255, 120))
TARGET_COLOR = (255, 255, 255)


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def render_scene(sample: SceneSample, path, mark_target: bool = False) -> Path:
    img = Image.fromarray(to_uint8(sample.image))
    if mark_target:
        ImageDraw.Draw(img).point(keypoint_pixel(sample.target), fill=TARGET_COLOR)
    return _save(img, path)


def keypoint_pixel(xy, upscale: int = 1) -> tuple[int, int]:
    """Raster cell holding continuous pixel coordinate ``xy``."""
    return int(np.floor(xy[0] * upscale)), int(np.floor(xy[1] * upscale))


def render_pose_overlay(
    image,
    poses: Sequence,
    scores: Optional[Sequence[float]] = None,
    out_path=None,
    upscale: int = 1,
) -> Path | Image.Image:
    """Draw ``poses`` (pixel frame) with their scores onto a copy of ``image``.

    ``image`` may be an array in [0, 1], a uint8 array or a path; the input is
    never modified.  Returns the written path, or the PIL image when
    ``out_path`` is None.
    """
    if isinstance(image, (str, Path)):
        with Image.open(image) as im:
            base = im.convert("RGB")
    else:
        base = Image.fromarray(to_uint8(image))
    if upscale != 1:
        base = base.resize((base.width * upscale, base.height * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(base)
    poses = [as_pose(p) for p in poses]
    for rank in range(len(poses) - 1, -1, -1):
        p = poses[rank] * upscale
        color = RANK_COLORS[rank % len(RANK_COLORS)]
        for a, b in BONES:
            draw.line([tuple(p[a]), tuple(p[b])], fill=color, width=1)
        for xy in poses[rank]:
            draw.point(keypoint_pixel(xy, upscale), fill=(255, 255, 255))
        if scores is not None:
            head = keypoint_pixel(poses[rank][9], upscale)
            draw.text((head[0] + 2, head[1] - 10), f"{float(scores[rank]):.2f}", fill=color)
    return base if out_path is None else _save(base, out_path)


def _save(img: Image.Image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
