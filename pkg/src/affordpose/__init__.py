"""Scene-conditioned human pose prediction with refined pose templates."""

from .pose import BBox, NUM_KEYPOINTS, normalize, refine
from .templates import TemplateLibrary, build_library, load_library, save_library

__version__ = "0.1.0"

__all__ = ["BBox", "NUM_KEYPOINTS", "TemplateLibrary", "build_library", "load_library", "normalize", "refine",
           "save_library"]
