"""Experiment harnesses on the synthetic world: the desk-scale comparison
against the regression baseline, the distillation ablation, the mined-label
analysis and the template-count study."""

from __future__ import annotations

import copy
import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .evaluation import EvalReport, evaluate_predictions
from .inference import predict
from .scene import SceneSample, crop_frame_poses
from .synth import generate_dataset
from .templates import TemplateLibrary, build_library
from .training import (
    SceneTensors,
    classification_accuracy,
    pretrain_teacher,
    scene_tensors,
    train,
    train_baseline,
)

TEST_OFFSET = 1_000_000  # sample-index offset keeping test scenes disjoint from training scenes


def world_split(cfg: RunConfig, n_train: int, n_test: int):
    train_set = generate_dataset(cfg.world, n_train)
    test_set = generate_dataset(cfg.world, n_test, start=TEST_OFFSET)
    return train_set, test_set


def library_for(samples: Sequence[SceneSample], cfg: RunConfig, k_prime: Optional[int] = None,
                k: Optional[int] = None) -> TemplateLibrary:
    t = cfg.templates
    return build_library(
        crop_frame_poses(samples), t.k_prime if k_prime is None else k_prime, t.k if k is None else k,
        seed=cfg.optim.seed, selection=t.selection, max_iter=t.kmeans_iter, n_init=t.kmeans_restarts,
    )


def evaluate_model(model, samples: Sequence[SceneSample], ks=(1, 3, 5), method: str = "model") -> EvalReport:
    preds = predict(model, samples)
    ks = tuple(k for k in ks if k <= len(preds[0].scores)) or (1,)
    return evaluate_predictions(preds, [s.gt_pose for s in samples], [s.height for s in samples], ks, method)


@torch.no_grad()
def validation_offset_loss(model, data: SceneTensors, idx=None, batch_size: int = 64) -> float:
    """Mean offset loss at the ground-truth template: squared distance between
    the normalized refined template and the normalized ground truth."""
    model.eval()
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    total = 0.0
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        out = model(data.crops(b, model.cfg.input_size))
        ar = torch.arange(len(b))
        err = ((out.norm_poses[ar, data.gt_index[b]] - data.gt_norm[b]) ** 2).flatten(1).sum(1)
        total += float(err.sum())
    return total / max(len(idx), 1)


# -- desk-scale comparison -------------------------------------------------------

@dataclass
class DeskResult:
    accuracy: float
    ours: EvalReport
    regression: EvalReport
    seconds: float
    timings: dict = field(default_factory=dict)

    @property
    def pck_margin(self) -> float:
        return self.ours.pck[1] - self.regression.pck[1]


def desk_benchmark(cfg: RunConfig, n_train: int = 2000, n_test: int = 500, teacher: bool = True,
                   progress: Optional[Callable[[str], None]] = None) -> DeskResult:
    t0 = time.perf_counter()
    timings = {}
    train_set, test_set = world_split(cfg, n_train, n_test)
    library = library_for(train_set, cfg)
    data = scene_tensors(train_set, library)
    timings["data"] = time.perf_counter() - t0
    tch = None
    if teacher and cfg.loss.lambda_dis > 0:
        tch = pretrain_teacher(data, library, cfg, progress=progress).teacher
        timings["teacher"] = time.perf_counter() - t0 - sum(timings.values())
    result = train(data, library, cfg, teacher=tch, progress=progress)
    timings["model"] = time.perf_counter() - t0 - sum(timings.values())
    reg = train_baseline(data, "regression", cfg, epochs=_total_epochs(result), progress=progress)
    timings["regression"] = time.perf_counter() - t0 - sum(timings.values())
    test_data = scene_tensors(test_set, library)
    acc = classification_accuracy(result.model, test_data)
    ours = evaluate_model(result.model, test_set, method="ours")
    regression = evaluate_model(reg, test_set, ks=(1,), method="regression")
    timings["eval"] = time.perf_counter() - t0 - sum(timings.values())
    return DeskResult(acc, ours, regression, time.perf_counter() - t0, timings)


def _total_epochs(result) -> int:
    return sum(len(a) for a in result.stage_accuracy)


# -- distillation ablation -------------------------------------------------------

@dataclass
class AblationResult:
    seeds: list[int]
    with_dis: list[float]
    without_dis: list[float]

    @property
    def mean_with(self) -> float:
        return float(np.mean(self.with_dis))

    @property
    def mean_without(self) -> float:
        return float(np.mean(self.without_dis))


def distillation_ablation(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2), n_train: int = 600, n_val: int = 200,
                          progress=None) -> AblationResult:
    """Final validation offset loss with and without the distillation term.

    Both arms of a seed share data, library, initialization and batch order;
    only ``lambda_dis`` differs.
    """
    with_dis, without = [], []
    for seed in seeds:
        run = copy.deepcopy(cfg)
        run.optim = replace(run.optim, seed=seed)
        run.world = replace(run.world, world_seed=seed)
        train_set, val_set = world_split(run, n_train, n_val)
        library = library_for(train_set, run)
        data = scene_tensors(train_set, library)
        val = scene_tensors(val_set, library)
        teacher = pretrain_teacher(data, library, run, progress=progress).teacher
        on = train(data, library, run, teacher=teacher, progress=progress)
        off_cfg = copy.deepcopy(run)
        off_cfg.loss = replace(off_cfg.loss, lambda_dis=0.0)
        off = train(data, library, off_cfg, teacher=None, progress=progress)
        with_dis.append(validation_offset_loss(on.model, val))
        without.append(validation_offset_loss(off.model, val))
        if progress:
            progress(f"seed {seed}: offset loss with {with_dis[-1]:.5f} without {without[-1]:.5f}")
    return AblationResult(list(seeds), with_dis, without)


# -- mined positives ---------------------------------------------------------------

@dataclass
class MiningResult:
    secondary_total: int
    secondary_mined: int
    labels: object  # LabelState
    family_template: dict
    training: object = None  # TrainResult
    data: Optional[SceneTensors] = None

    @property
    def mined_fraction(self) -> float:
        return self.secondary_mined / self.secondary_total if self.secondary_total else float("nan")


def family_templates(records: Sequence[dict], gt_index: np.ndarray) -> dict[int, int]:
    """Template most often assigned as ground truth to each true family."""
    out = {}
    fams = np.array([r["family_index"] for r in records])
    for f in np.unique(fams):
        out[int(f)] = int(np.bincount(gt_index[fams == f]).argmax())
    return out


def mining_analysis(cfg: RunConfig, n_train: int = 1000, progress=None) -> MiningResult:
    """Train with self-training on an ambiguous world and count how many truly
    admissible secondary families ended up labelled positive."""
    samples = generate_dataset(cfg.world, n_train)
    library = library_for(samples, cfg)
    data = scene_tensors(samples, library)
    result = train(data, library, cfg, progress=progress)
    rows = result.train_idx
    records = [samples[i].meta for i in rows]
    gt_rows = data.gt_index[rows].numpy()
    fam_tpl = family_templates(records, gt_rows)
    total = mined = 0
    for r, rec in enumerate(records):
        for fam in rec["admissible"]:
            # a family sharing the GT template is not a secondary positive
            if fam == rec["family_index"] or fam not in fam_tpl or fam_tpl[fam] == gt_rows[r]:
                continue
            total += 1
            mined += int(result.labels.labels[r, fam_tpl[fam]] == 1)
    return MiningResult(total, mined, result.labels, fam_tpl, result, data)


# -- template-count study ----------------------------------------------------------

STUDY_METRICS = (("Top-3 PCK", "pck", 3), ("Top-5 PCK", "pck", 5), ("Top-3 MSE", "mse", 3), ("Top-5 MSE", "mse", 5))


@dataclass
class StudyResult:
    columns: list[str]
    reports: list[EvalReport]
    settings: list[tuple[int, int]]

    def to_csv(self) -> str:
        """One column per template setting, one row per metric."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["# templates"] + self.columns)
        for name, metric, k in STUDY_METRICS:
            w.writerow([name] + [_metric(r, metric, k) for r in self.reports])
        return buf.getvalue()


def _metric(report: EvalReport, metric: str, k: int) -> str:
    table = report.pck if metric == "pck" else report.mse
    return f"{table[k]:.6f}" if k in table else ""


def template_study(train_set: Sequence[SceneSample], test_set: Sequence[SceneSample], cfg: RunConfig,
                   k_primes: Sequence[int] = (), ks: Sequence[int] = (7, 10, 14, 20), progress=None) -> StudyResult:
    """Train and evaluate one model per template setting.

    ``k_primes`` entries keep every K-means center (K = K'); ``ks`` entries
    select K of ``cfg.templates.k_prime`` centers.
    """
    settings = [(kp, kp) for kp in k_primes] + [(cfg.templates.k_prime, k) for k in ks]
    columns = [f"K'{kp}" for kp in k_primes] + [f"K{k}" for k in ks]
    reports = []
    for (kp, k), col in zip(settings, columns):
        library = library_for(train_set, cfg, kp, k)
        result = train(train_set, library, cfg, progress=progress)
        reports.append(evaluate_model(result.model, test_set, method=col))
        if progress:
            progress(f"{col}: top-3 PCK {reports[-1].pck.get(3, float('nan')):.4f}")
    return StudyResult(columns, reports, settings)
