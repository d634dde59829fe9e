"""Versioned model checkpoints.

A checkpoint stores the model kind, its config, the weights and, when a
library was involved, that library's checksum.  Template-model checkpoints
also embed the library itself so they load standalone.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional

import torch

from .config import ModelConfig
from .model import HeatmapBaseline, RegressionBaseline, TemplatePoseNet, Teacher
from .templates import TemplateLibrary, library_from_dict, library_to_dict

FORMAT_VERSION = 1
KINDS = ("template", "teacher", "regression", "heatmap")


class CheckpointError(ValueError):
    pass


def model_kind(model) -> str:
    for cls, kind in ((TemplatePoseNet, "template"), (Teacher, "teacher"),
                      (RegressionBaseline, "regression"), (HeatmapBaseline, "heatmap")):
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, cfg: ModelConfig, path, library: Optional[TemplateLibrary] = None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = model_kind(model)
    extra = dict(extra or {})
    if kind == "template" and library is not None:
        extra["library"] = library_to_dict(library)
    doc = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "model_config": asdict(cfg),
        "state_dict": model.state_dict(),
        "library_checksum": library.checksum() if library is not None else None,
        "extra": extra,
    }
    torch.save(doc, path)
    return path


def load_checkpoint(path, library: Optional[TemplateLibrary] = None, expect: Optional[str] = None):
    """Rebuild the stored model.  Returns ``(model, doc)``.

    Template models are rebuilt with ``library`` if given, else with the
    embedded copy; a library whose checksum differs from the training one is
    refused.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(doc, dict) or doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    kind = doc["kind"]
    if kind not in KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    if expect is not None and kind != expect:
        raise CheckpointError(f"{path}: expected a {expect} checkpoint, found {kind}")
    cfg = ModelConfig(**doc["model_config"])
    stored = doc.get("library_checksum")
    if library is not None and stored is not None and library.checksum() != stored:
        raise CheckpointError(f"{path}: template library does not match the one used for training")
    if kind == "template":
        if library is None and doc["extra"].get("library"):
            library = library_from_dict(doc["extra"]["library"], f"{path} (embedded library)")
        if library is None:
            raise CheckpointError(f"{path}: a template library is required to load this model")
        model = TemplatePoseNet(cfg, library.templates)
    elif kind == "teacher":
        model = Teacher(cfg)
    elif kind == "regression":
        model = RegressionBaseline(cfg)
    else:
        model = HeatmapBaseline(cfg)
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model, doc
