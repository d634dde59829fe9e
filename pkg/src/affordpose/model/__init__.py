from .heatmaps import decode_heatmaps, gaussian_heatmaps, render_heatmaps, render_heatmaps_t
from .nets import (
    Discriminator,
    HeatmapBaseline,
    ModelOutput,
    RegressionBaseline,
    TemplatePoseNet,
    Teacher,
    discriminator_input,
)
from .poseops import normalize_poses, refine_poses
from .roi import crop_boxes_to_feature, roi_align, roi_resize, scale_to_crop_boxes

__all__ = [
    "Discriminator", "HeatmapBaseline", "ModelOutput", "RegressionBaseline", "TemplatePoseNet", "Teacher",
    "crop_boxes_to_feature", "decode_heatmaps", "discriminator_input", "gaussian_heatmaps",
    "normalize_poses", "refine_poses", "render_heatmaps", "render_heatmaps_t", "roi_align", "roi_resize",
    "scale_to_crop_boxes",
]
