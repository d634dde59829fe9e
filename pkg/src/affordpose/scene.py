"""Scene inputs: the three square crops around a target point, ground-truth
labels, conversions between pixel and crop frames, and the dataset manifest.

Pixel coordinates are continuous: pixel ``(row, col)`` covers
``[col, col + 1] x [row, row + 1]``, y grows downward.  The crop frame is
centered on the target, y grows upward and ``[-0.5, 0.5]`` spans the
height-sized crop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .pose import EPS, BBox, as_pose, enclosing_box, flatten, is_degenerate, normalize
from .templates import TemplateLibrary, nearest_template

DEFAULT_INPUT_SIZE = 224
MANIFEST_VERSION = 1


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    target: tuple[float, float]
    gt_pose: Optional[np.ndarray] = None  # pixel frame
    sample_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        h, w = self.image.shape[:2]
        if h < 8 or w < 8:
            raise ValueError(f"image must be at least 8x8, got {h}x{w}")
        x, y = (float(v) for v in self.target)
        if not (0 <= x <= w and 0 <= y <= h):
            raise ValueError(f"target {(x, y)} outside {w}x{h} image")
        self.target = (x, y)
        if self.gt_pose is not None:
            self.gt_pose = as_pose(self.gt_pose)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class PreparedInput:
    crops: np.ndarray  # (3, S, S, 3)
    boxes: list[BBox]  # source boxes in pixel frame


@dataclass
class GroundTruthLabel:
    class_index: int
    scale: np.ndarray  # (2,)
    norm_pose: np.ndarray  # (16, 2)
    degenerate: bool = False
    clamped: bool = False


def crop_boxes(target, height: float, width: float) -> list[BBox]:
    ox, oy = target
    half, quarter = height / 2.0, height / 4.0
    return [
        BBox(0.0, 0.0, float(width), float(height)),
        BBox(ox - half, oy - half, ox + half, oy + half),
        BBox(ox - quarter, oy - quarter, ox + quarter, oy + quarter),
    ]


def _crop_grid(boxes: torch.Tensor, size: int, height: int, width: int):
    """Source pixel coordinates of output pixel centers for (B, 3, 4) boxes."""
    steps = (torch.arange(size, dtype=boxes.dtype) + 0.5) / size
    x0, y0, x1, y1 = boxes.unbind(-1)
    xs = x0[..., None] + steps * (x1 - x0)[..., None]  # (B, 3, S)
    ys = y0[..., None] + steps * (y1 - y0)[..., None]
    gx = xs[..., None, :].expand(*xs.shape[:-1], size, size)
    gy = ys[..., :, None].expand(*ys.shape[:-1], size, size)
    inside = (gx >= 0) & (gx <= width) & (gy >= 0) & (gy <= height)
    grid = torch.stack([2 * gx / width - 1, 2 * gy / height - 1], dim=-1)
    return grid, inside


def crop_batch(images: torch.Tensor, targets: torch.Tensor, size: int = DEFAULT_INPUT_SIZE) -> torch.Tensor:
    """Three bilinear crops per image.

    ``images`` is (B, 3, H, W), ``targets`` (B, 2) pixel coordinates.
    Returns (B, 3, 3, size, size): whole image, H-sided and H/2-sided squares
    around the target.  Samples falling outside the image are zero.
    """
    b, _, h, w = images.shape
    t = targets.to(images.dtype)
    half, quarter = h / 2.0, h / 4.0
    ox, oy = t[:, 0], t[:, 1]
    zeros, ones = torch.zeros_like(ox), torch.ones_like(ox)
    boxes = torch.stack([
        torch.stack([zeros, zeros, ones * w, ones * h], -1),
        torch.stack([ox - half, oy - half, ox + half, oy + half], -1),
        torch.stack([ox - quarter, oy - quarter, ox + quarter, oy + quarter], -1),
    ], dim=1)
    grid, inside = _crop_grid(boxes, size, h, w)
    src = images[:, None].expand(b, 3, *images.shape[1:]).reshape(b * 3, *images.shape[1:])
    out = F.grid_sample(
        src, grid.reshape(b * 3, size, size, 2), mode="bilinear",
        padding_mode="border", align_corners=False,
    )
    out = out * inside.reshape(b * 3, 1, size, size).to(out.dtype)
    return out.reshape(b, 3, 3, size, size)


def make_crops(sample: SceneSample, size: int = DEFAULT_INPUT_SIZE) -> PreparedInput:
    img = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))[None].double()
    tgt = torch.tensor([sample.target], dtype=torch.float64)
    crops = crop_batch(img, tgt, size)[0].permute(0, 2, 3, 1).numpy().astype(np.float32)
    return PreparedInput(crops, crop_boxes(sample.target, sample.height, sample.width))


def crop_pixel_to_source(box: BBox, size: int, row: float, col: float) -> tuple[float, float]:
    """Source pixel coordinate seen by output pixel center ``(row, col)``."""
    return (
        box.x_min + (col + 0.5) / size * box.width,
        box.y_min + (row + 0.5) / size * box.height,
    )


def to_crop_frame(pose, target, height: float) -> np.ndarray:
    p = as_pose(pose)
    ox, oy = target
    return np.stack([(p[:, 0] - ox) / height, (oy - p[:, 1]) / height], axis=1)


def to_pixel_frame(pose, target, height: float) -> np.ndarray:
    p = as_pose(pose)
    ox, oy = target
    return np.stack([ox + p[:, 0] * height, oy - p[:, 1] * height], axis=1)


def pose_to_crop_frame(pose, sample: SceneSample) -> np.ndarray:
    return to_crop_frame(pose, sample.target, sample.height)


def crop_frame_to_pixels(pose, sample: SceneSample) -> np.ndarray:
    return to_pixel_frame(pose, sample.target, sample.height)


def target_scale(pose, image_height: float) -> tuple[np.ndarray, bool]:
    box = enclosing_box(pose)
    raw = np.array([box.width, box.height]) / float(image_height)
    s = np.clip(raw, 0.0, 2.0)
    return s, bool(np.any(raw != s))


def crop_frame_poses(samples: Sequence[SceneSample]) -> np.ndarray:
    """Ground-truth poses of ``samples`` in their crop frames; templates are
    built from these so they share the model's y-up orientation."""
    return np.stack([pose_to_crop_frame(s.gt_pose, s) for s in samples])


def make_labels(sample: SceneSample, library: TemplateLibrary) -> GroundTruthLabel:
    if sample.gt_pose is None:
        raise ValueError(f"sample {sample.sample_id!r} has no ground-truth pose")
    if len(library) == 0:
        raise ValueError("empty template library")
    pose = pose_to_crop_frame(sample.gt_pose, sample)
    scale, clamped = target_scale(sample.gt_pose, sample.height)
    degenerate = is_degenerate(pose)
    if degenerate:
        sample.meta["degenerate_pose"] = True
    if clamped:
        sample.meta["scale_clamped"] = True
    return GroundTruthLabel(
        class_index=nearest_template(pose, library),
        scale=scale,
        norm_pose=normalize(pose),
        degenerate=degenerate,
        clamped=clamped,
    )


# -- dataset manifest -------------------------------------------------------

def _save_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, optimize=False)


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_dataset(samples: Sequence[SceneSample], out_dir, truth: Optional[Sequence[dict]] = None) -> Path:
    """Write PNG images plus ``manifest.json``; ``truth`` goes to a sidecar."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rel = f"images/{s.sample_id}.png"
        _save_png(s.image, out / rel)
        records.append({
            "id": s.sample_id,
            "image": rel,
            "target": [float(s.target[0]), float(s.target[1])],
            "pose": flatten(s.gt_pose) if s.gt_pose is not None else None,
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"version": MANIFEST_VERSION, "samples": records}, indent=1))
    if truth is not None:
        (out / "truth.json").write_text(json.dumps(list(truth), indent=1))
    return manifest


def load_dataset(path) -> list[SceneSample]:
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    root = manifest.parent
    doc = json.loads(manifest.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{manifest}: unsupported manifest version {doc.get('version')!r}")
    samples = []
    for i, rec in enumerate(doc["samples"]):
        try:
            pose = rec.get("pose")
            samples.append(SceneSample(
                image=load_png(root / rec["image"]),
                target=tuple(rec["target"]),
                gt_pose=None if pose is None else np.asarray(pose, dtype=np.float64),
                sample_id=str(rec["id"]),
            ))
        except (KeyError, ValueError) as e:
            raise ValueError(f"{manifest}: samples[{i}]: {e}") from e
    return samples


def load_truth(path) -> Optional[list[dict]]:
    p = Path(path)
    p = p / "truth.json" if p.is_dir() else p.parent / "truth.json"
    return json.loads(p.read_text()) if p.exists() else None


__all__ = [
    "EPS", "SceneSample", "PreparedInput", "GroundTruthLabel", "crop_boxes", "crop_batch",
    "make_crops", "crop_pixel_to_source", "pose_to_crop_frame", "crop_frame_to_pixels",
    "to_crop_frame", "to_pixel_frame",
    "target_scale", "make_labels", "crop_frame_poses", "save_dataset", "load_dataset", "load_png", "load_truth",
]
