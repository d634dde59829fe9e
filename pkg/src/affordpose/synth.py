"""Procedural scene/pose world used in place of a real affordance dataset.

Each scene is a wall/floor backdrop with a few flat-colored props.  The prop
under the target point decides which pose families fit there, its shade
decides a continuous pose variation, and the target's height in the image
decides the pose size (things lower in the frame are closer, hence bigger).
Every sample is a pure function of ``(config, index)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .pose import normalize
from .scene import SceneSample

FAMILIES = ("stand", "sit", "reach", "walk")
REGIONS = ("doorway", "seat", "shelf", "floor")  # region i admits family i

PALETTE = np.array([
    [0.10, 0.55, 0.25],  # doorway
    [0.70, 0.15, 0.15],  # seat
    [0.15, 0.30, 0.75],  # shelf
    [0.85, 0.65, 0.30],  # rug on the floor
])
WALL = np.array([0.82, 0.80, 0.74])
FLOOR = np.array([0.45, 0.42, 0.40])
HORIZON = 0.4
VARIATION_STEP = 0.5

# Body-space keypoints, y up, roughly unit height.  Two variants per family;
# a sample's pose moves from A toward B by VARIATION_STEP * t.
_LEGS_STAND = [(-0.10, 0.00), (-0.10, 0.25), (0.09, 0.50), (-0.09, 0.50), (0.10, 0.25), (0.10, 0.00)]
_SPINE = [(0.0, 0.50), (0.0, 0.78), (0.0, 0.85), (0.0, 1.00)]


def _pose(legs, spine, arms):
    r_wrist, r_shoulder, r_elbow, l_shoulder, l_elbow, l_wrist = arms
    return np.array(legs + spine + [r_wrist, r_shoulder, r_elbow, l_shoulder, l_elbow, l_wrist])


_CANONICAL = {
    "stand": (
        _pose(_LEGS_STAND, _SPINE, [(-0.21, 0.46), (-0.17, 0.80), (-0.20, 0.62), (0.17, 0.80), (0.20, 0.62), (0.21, 0.46)]),
        _pose(_LEGS_STAND, _SPINE, [(-0.13, 0.52), (-0.17, 0.80), (-0.30, 0.64), (0.17, 0.80), (0.30, 0.64), (0.13, 0.52)]),
    ),
    "sit": (
        _pose([(-0.20, 0.00), (-0.24, 0.33), (0.10, 0.34), (-0.10, 0.34), (0.24, 0.33), (0.20, 0.00)],
              [(0.0, 0.34), (0.0, 0.64), (0.0, 0.71), (0.0, 0.86)],
              [(-0.12, 0.34), (-0.17, 0.66), (-0.22, 0.48), (0.17, 0.66), (0.22, 0.48), (0.12, 0.34)]),
        _pose([(-0.40, 0.04), (-0.28, 0.32), (0.10, 0.34), (-0.10, 0.34), (0.28, 0.32), (0.40, 0.04)],
              [(0.0, 0.34), (0.0, 0.64), (0.0, 0.71), (0.0, 0.86)],
              [(-0.12, 0.34), (-0.17, 0.66), (-0.22, 0.48), (0.17, 0.66), (0.22, 0.48), (0.12, 0.34)]),
    ),
    "reach": (
        _pose(_LEGS_STAND, _SPINE, [(-0.30, 1.22), (-0.17, 0.80), (-0.24, 1.01), (0.17, 0.80), (0.20, 0.62), (0.21, 0.46)]),
        _pose(_LEGS_STAND, _SPINE, [(-0.58, 0.88), (-0.17, 0.80), (-0.37, 0.84), (0.17, 0.80), (0.20, 0.62), (0.21, 0.46)]),
    ),
    "walk": (
        _pose([(-0.24, 0.00), (-0.15, 0.25), (0.06, 0.50), (-0.06, 0.50), (0.12, 0.27), (0.22, 0.03)],
              _SPINE,
              [(-0.02, 0.48), (-0.15, 0.80), (-0.08, 0.63), (0.15, 0.80), (0.24, 0.64), (0.30, 0.50)]),
        _pose([(-0.36, 0.02), (-0.22, 0.26), (0.06, 0.50), (-0.06, 0.50), (0.20, 0.28), (0.36, 0.05)],
              _SPINE,
              [(0.04, 0.50), (-0.15, 0.80), (-0.06, 0.63), (0.15, 0.80), (0.30, 0.66), (0.40, 0.54)]),
    ),
}


@dataclass
class WorldConfig:
    image_height: int = 96
    image_width: int = 128
    n_families: int = 4
    jitter: float = 0.02  # keypoint noise sigma, normalized pose units
    scale_jitter: float = 0.05  # relative size noise, uniform +-
    ambiguity_rate: float = 0.0
    variation: float = 1.0  # width of the pose-variation range t in [0, variation]
    world_seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_families <= len(FAMILIES):
            raise ValueError(f"n_families must be in [2, {len(FAMILIES)}]")
        if self.image_height < 8 or self.image_width < 8:
            raise ValueError("image must be at least 8x8")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError("ambiguity_rate must be in [0, 1]")


def family_pose(family, t: float = 0.5) -> np.ndarray:
    """Body-space pose of ``family`` (name or index) at variation ``t``."""
    name = FAMILIES[family] if isinstance(family, (int, np.integer)) else family
    a, b = _CANONICAL[name]
    return a + VARIATION_STEP * t * (b - a)


def canonical_poses(n_families: int = 4) -> np.ndarray:
    return np.stack([normalize(family_pose(f, 0.5)) for f in range(n_families)])


def _layout(cfg: WorldConfig, index: int) -> dict:
    rng = np.random.default_rng([cfg.world_seed, index])
    h, w = cfg.image_height, cfg.image_width
    fam = int(rng.integers(cfg.n_families))
    admissible = [fam]
    if cfg.ambiguity_rate > 0 and rng.random() < cfg.ambiguity_rate:
        others = [f for f in range(cfg.n_families) if f != fam]
        admissible.append(int(rng.choice(others)))
    t = float(rng.uniform(0.0, cfg.variation))
    tx = float(rng.uniform(0.12, 0.88) * w)
    ty = float(rng.uniform(0.52, 0.9) * h)
    rw = float(rng.uniform(0.18, 0.3) * h)
    rh = float(rng.uniform(0.18, 0.3) * h)
    rx0 = tx - float(rng.uniform(0.25, 0.75)) * rw
    ry0 = ty - float(rng.uniform(0.25, 0.75)) * rh
    distractors = []
    for _ in range(int(rng.integers(1, 4))):
        dw, dh = float(rng.uniform(0.1, 0.3) * h), float(rng.uniform(0.1, 0.3) * h)
        dx0 = float(rng.uniform(0, w - dw))
        dy0 = float(rng.uniform(HORIZON * h * 0.5, h - dh))
        kind = int(rng.integers(cfg.n_families))
        shade = float(rng.uniform(0.0, 1.0))
        if not (dx0 <= tx <= dx0 + dw and dy0 <= ty <= dy0 + dh):
            distractors.append((dx0, dy0, dw, dh, kind, shade))
    height_frac = (0.35 + 0.6 * (ty / h - 0.5)) * float(rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter))
    noise = rng.normal(0.0, cfg.jitter, size=(16, 2)) if cfg.jitter > 0 else np.zeros((16, 2))
    return dict(
        family=fam, admissible=sorted(admissible), t=t, target=(tx, ty),
        region=(rx0, ry0, rw, rh), distractors=distractors,
        height_frac=height_frac, noise=noise,
    )


def _fill(img: np.ndarray, x0: float, y0: float, w: float, h: float, color) -> None:
    H, W = img.shape[:2]
    c0, c1 = max(int(round(x0)), 0), min(int(round(x0 + w)), W)
    r0, r1 = max(int(round(y0)), 0), min(int(round(y0 + h)), H)
    if c1 > c0 and r1 > r0:
        img[r0:r1, c0:c1] = color


def _shade(kind: int, t: float) -> np.ndarray:
    return PALETTE[kind] * (0.55 + 0.45 * t)


def render_layout(cfg: WorldConfig, lay: dict) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    img = np.empty((h, w, 3))
    hz = int(round(HORIZON * h))
    img[:hz] = WALL
    img[hz:] = FLOOR
    for dx0, dy0, dw, dh, kind, shade in lay["distractors"]:
        _fill(img, dx0, dy0, dw, dh, _shade(kind, shade))
    rx0, ry0, rw, rh = lay["region"]
    kinds = lay["admissible"]
    _fill(img, rx0, ry0, rw, rh, _shade(kinds[0], lay["t"]))
    if len(kinds) > 1:
        # two-pixel stripes of the partner region's color
        r0 = max(int(round(ry0)), 0)
        r1 = min(int(round(ry0 + rh)), h)
        for r in range(r0, r1):
            if ((r - r0) // 2) % 2 == 1:
                _fill(img, rx0, r, rw, 1, _shade(kinds[1], lay["t"]))
    return np.rint(np.clip(img, 0, 1) * 255.0) / 255.0


def layout_pose(cfg: WorldConfig, lay: dict) -> np.ndarray:
    """Ground-truth pose in the pixel frame, enclosing box centered on target."""
    raw = family_pose(lay["family"], lay["t"]) + lay["noise"]
    lo, hi = raw.min(0), raw.max(0)
    aspect = (hi[0] - lo[0]) / max(hi[1] - lo[1], 1e-9)
    height = lay["height_frac"] * cfg.image_height
    size = np.array([aspect * height, height])
    tx, ty = lay["target"]
    n = normalize(raw)
    return np.stack([tx + n[:, 0] * size[0], ty - n[:, 1] * size[1]], axis=1)


def make_sample(cfg: WorldConfig, index: int) -> SceneSample:
    lay = _layout(cfg, index)
    return SceneSample(
        image=render_layout(cfg, lay).astype(np.float32),
        target=lay["target"],
        gt_pose=layout_pose(cfg, lay),
        sample_id=f"s{index:06d}",
        meta=truth_record(lay, index),
    )


def truth_record(lay: dict, index: int) -> dict:
    return {
        "id": f"s{index:06d}",
        "family": FAMILIES[lay["family"]],
        "family_index": lay["family"],
        "admissible": [int(a) for a in lay["admissible"]],
        "variation": lay["t"],
        "height_frac": lay["height_frac"],
    }


def sample_truth(cfg: WorldConfig, index: int) -> dict:
    """Diagnostics for one sample without rendering it."""
    return truth_record(_layout(cfg, index), index)


def generate_dataset(cfg: WorldConfig, n: int, start: int = 0) -> list[SceneSample]:
    return [make_sample(cfg, i) for i in range(start, start + n)]


def world_config_dict(cfg: Optional[WorldConfig]) -> dict:
    return asdict(cfg or WorldConfig())
