"""PCK / MSE metrics and best-of-top-k evaluation.

Poses passed to the metrics must share a frame; the report code works in the
pixel frame and divides by the image height for MSE.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pose import as_pose, flatten, torso_diameter

DEFAULT_KS = (1, 3, 5)


def pck(pred, gt, alpha: float = 0.2) -> float:
    """Fraction of keypoints within ``alpha`` torso diameters of ``gt`` (inclusive)."""
    p, g = as_pose(pred), as_pose(gt)
    thr = alpha * torso_diameter(g)
    err = np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])
    return float(np.mean(err <= thr))


def mse(pred, gt, image_height: float, multiplier: float = 1.0) -> float:
    """Mean squared error of height-normalized coordinates over all 2M values."""
    p, g = as_pose(pred), as_pose(gt)
    return float(multiplier * np.mean(((p - g) / float(image_height)) ** 2))


def topk_order(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores, descending, ties to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.argsort(-s, kind="stable")[: max(0, min(k, len(s)))]


def topk_select(scores, poses, k: int) -> list[np.ndarray]:
    return [as_pose(poses[i]) for i in topk_order(scores, k)]


@dataclass
class SamplePrediction:
    sample_id: str
    scores: np.ndarray  # (K,)
    poses: np.ndarray  # (K, 16, 2), pixel frame

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "scores": [float(s) for s in self.scores],
            "poses": [flatten(p) for p in self.poses],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SamplePrediction":
        return cls(
            str(doc["id"]),
            np.asarray(doc["scores"], dtype=np.float64),
            np.asarray(doc["poses"], dtype=np.float64).reshape(-1, 16, 2),
        )


@dataclass
class EvalReport:
    method: str
    ks: tuple[int, ...]
    pck: dict[int, float]
    mse: dict[int, float]
    records: list[dict] = field(default_factory=list)
    mse_multiplier: float = 1.0

    def rows(self) -> list[dict]:
        return [{"method": self.method, "k": k, "pck": self.pck[k], "mse": self.mse[k]} for k in self.ks]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["method", "k", "pck", "mse"])
        w.writeheader()
        for r in self.rows():
            w.writerow(r)
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'method':<14}" + "".join(f"  Top-{k} PCK  Top-{k} MSE" for k in self.ks)
        line = f"{self.method:<14}" + "".join(f"  {self.pck[k]:10.4f}  {self.mse[k]:10.6f}" for k in self.ks)
        return head + "\n" + line

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.txt").write_text(self.table() + "\n")
        with open(out / "per_sample.csv", "w", newline="") as fh:
            if self.records:
                w = csv.DictWriter(fh, fieldnames=list(self.records[0]))
                w.writeheader()
                w.writerows(self.records)


def evaluate_predictions(
    predictions: Sequence[SamplePrediction],
    gt_poses: Sequence,
    image_heights: Sequence[float],
    ks: Iterable[int] = DEFAULT_KS,
    method: str = "model",
    alpha: float = 0.2,
    mse_multiplier: float = 1.0,
) -> EvalReport:
    """Best-of-top-k scoring: per sample and per k, the max PCK and the min MSE
    among the k most confident poses, each chosen independently."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if len(predictions) != len(gt_poses):
        raise ValueError("one ground-truth pose per prediction required")
    sums_p = {k: 0.0 for k in ks}
    sums_m = {k: 0.0 for k in ks}
    records = []
    for pred, gt, h in zip(predictions, gt_poses, image_heights):
        order = topk_order(pred.scores, max(ks))
        pcks = [pck(pred.poses[i], gt, alpha) for i in order]
        mses = [mse(pred.poses[i], gt, h, mse_multiplier) for i in order]
        rec = {"id": pred.sample_id, "top1_template": int(order[0])}
        for k in ks:
            bp, bm = max(pcks[:k]), min(mses[:k])
            sums_p[k] += bp
            sums_m[k] += bm
            rec[f"pck@{k}"] = bp
            rec[f"mse@{k}"] = bm
        records.append(rec)
    n = max(len(predictions), 1)
    return EvalReport(
        method, ks, {k: sums_p[k] / n for k in ks}, {k: sums_m[k] / n for k in ks}, records, mse_multiplier
    )


def save_predictions(predictions: Sequence[SamplePrediction], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_json()) + "\n")
    return path


def load_predictions(path) -> list[SamplePrediction]:
    with open(path) as fh:
        return [SamplePrediction.from_json(json.loads(line)) for line in fh if line.strip()]


def score_prediction_file(path, samples, ks: Iterable[int] = DEFAULT_KS, method: str = "external") -> EvalReport:
    """Score a prediction dump (JSON lines, pixel frame) against a dataset."""
    preds = {p.sample_id: p for p in load_predictions(path)}
    missing = [s.sample_id for s in samples if s.sample_id not in preds]
    if missing:
        raise ValueError(f"predictions missing for {len(missing)} samples, e.g. {missing[0]!r}")
    ordered = [preds[s.sample_id] for s in samples]
    return evaluate_predictions(ordered, [s.gt_pose for s in samples], [s.height for s in samples], ks, method)
