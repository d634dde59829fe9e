"""Command-line entry points.

Every config field is also a flag (kebab-case).  Settings resolve in order:
``--preset``, then the ``--config`` TOML or JSON file, then explicit flags.
Each command writes into its own run directory together with the resolved
configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, all_fields, desk_config, load_config_file
from .evaluation import DEFAULT_KS, evaluate_predictions, save_predictions, score_prediction_file
from .experiments import template_study
from .inference import predict
from .render import render_pose_overlay
from .scene import SceneSample, crop_frame_poses, load_dataset, load_png, save_dataset
from .synth import generate_dataset
from .templates import TemplateLibrary, build_library, load_library, save_library
from .training import pretrain_teacher, train, train_baseline

OUT_ENV = "AFFORDPOSE_OUT"
log = logging.getLogger("affordpose")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--preset", choices=("full", "desk"), default="full",
                        help="starting configuration before --config and flags (default: full)")
    parent.add_argument("--config", help="TOML or JSON config file")
    parent.add_argument("--out", help=f"run directory (default: ${OUT_ENV}/<command>-<time>)")
    parent.add_argument("-v", "--verbose", action="store_true")
    group = parent.add_argument_group("config overrides")
    for key, (section, typ, default) in all_fields().items():
        flag = "--" + key.replace("_", "-")
        kw = dict(dest=f"cfg__{section}__{key}", default=argparse.SUPPRESS, metavar=key.upper())
        if typ is bool:
            group.add_argument(flag, type=_bool, help=f"{section} (default {default})", **kw)
        elif typ is tuple:
            group.add_argument(flag, type=_int_list, help=f"{section}, comma list (default {default})", **kw)
        else:
            group.add_argument(flag, type=typ, help=f"{section} (default {default})", **kw)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    p = _Parser(prog="affordpose", description="Scene-conditioned pose templates on synthetic worlds.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[parent], help="render a synthetic dataset")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--start", type=int, default=0, help="first sample index")

    b = sub.add_parser("build-templates", parents=[parent], help="cluster poses into a template library")
    b.add_argument("--dataset", required=True)
    b.add_argument("--explicit-indices", type=_int_list, help="center indices for explicit selection")

    t = sub.add_parser("pretrain-teacher", parents=[parent], help="pretrain the distillation teacher")
    t.add_argument("--dataset", required=True)
    t.add_argument("--library", required=True)

    tr = sub.add_parser("train", parents=[parent], help="train the template model or a baseline")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--library", help="template library (template model only)")
    tr.add_argument("--teacher", help="teacher checkpoint for the distillation term")
    tr.add_argument("--model", choices=("template", "regression", "heatmap"), default="template")

    e = sub.add_parser("eval", parents=[parent], help="score a checkpoint or a prediction dump")
    e.add_argument("--dataset", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="JSON-lines prediction dump (pixel frame)")
    e.add_argument("--library", help="override the library stored in the checkpoint")
    e.add_argument("--ks", type=_int_list, default=list(DEFAULT_KS))
    e.add_argument("--method", default=None, help="method tag for the report")

    i = sub.add_parser("infer", parents=[parent], help="predict poses for one image and target point")
    i.add_argument("--image", required=True)
    i.add_argument("--target-x", type=float, required=True)
    i.add_argument("--target-y", type=float, required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--library")
    i.add_argument("--top-k", type=int, default=3)
    i.add_argument("--upscale", type=int, default=4, help="overlay magnification")

    s = sub.add_parser("study-templates", parents=[parent], help="train one model per template count")
    s.add_argument("--dataset", required=True)
    s.add_argument("--test-dataset", help="evaluation set (default: seeded 20%% split of --dataset)")
    s.add_argument("--k-primes", type=_int_list, default=[], help="K-means sizes used without selection")
    s.add_argument("--k-list", type=_int_list, default=[7, 10, 14, 20], help="selected template counts")
    return p


# -- plumbing ----------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = desk_config() if args.preset == "desk" else RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        cfg.update(load_config_file(path))
    for dest, value in vars(args).items():
        if dest.startswith("cfg__"):
            _, section, key = dest.split("__", 2)
            cfg.set(key, value, section=section)
    return cfg


def run_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ENV, "runs"))
        out = root / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _exists(path, what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _dataset(path) -> list[SceneSample]:
    samples = load_dataset(_exists(path, "dataset"))
    if not samples:
        raise CliError(f"dataset is empty: {path}")
    return samples


def _record(cfg: RunConfig, out: Path, args, **paths) -> None:
    cfg.paths.update({k: str(v) for k, v in paths.items() if v is not None})
    cfg.paths["command"] = args.command
    cfg.paths["run_dir"] = str(out)
    cfg.save(out / "run_config.json")


def _progress(msg: str) -> None:
    log.info(msg)


def _load_model(args):
    library = load_library(_exists(args.library, "library")) if getattr(args, "library", None) else None
    model, _ = load_checkpoint(_exists(args.checkpoint, "checkpoint"), library)
    return model


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> str:
    if args.n <= 0:
        raise CliError("--n must be positive")
    samples = generate_dataset(cfg.world, args.n, start=args.start)
    save_dataset(samples, out, truth=[s.meta for s in samples])
    _record(cfg, out, args, dataset=out)
    return f"wrote {len(samples)} samples to {out}"


def cmd_build_templates(args, cfg: RunConfig, out: Path) -> str:
    samples = _dataset(args.dataset)
    t = cfg.templates
    library = build_library(crop_frame_poses(samples), t.k_prime, t.k, seed=cfg.optim.seed,
                            selection=t.selection, max_iter=t.kmeans_iter, explicit_indices=args.explicit_indices,
                            n_init=t.kmeans_restarts)
    path = save_library(library, out / "library.json")
    _record(cfg, out, args, dataset=args.dataset, library=path)
    return f"wrote {library.K} templates to {path}"


def cmd_pretrain_teacher(args, cfg: RunConfig, out: Path) -> str:
    samples = _dataset(args.dataset)
    library = load_library(_exists(args.library, "library"))
    res = pretrain_teacher(samples, library, cfg, progress=_progress)
    path = save_checkpoint(res.teacher, _model_cfg(cfg, library), out / "teacher.pt", library,
                           extra={"val_before": res.val_before, "val_after": res.val_after})
    _write_json(out / "summary.json", {"val_offset_before": res.val_before, "val_offset_after": res.val_after})
    _record(cfg, out, args, dataset=args.dataset, library=args.library, teacher=path)
    return f"teacher validation offset loss {res.val_before:.4f} -> {res.val_after:.4f}; wrote {path}"


def _model_cfg(cfg: RunConfig, library: Optional[TemplateLibrary]):
    return replace(cfg.model, num_templates=len(library)) if library is not None else cfg.model


def cmd_train(args, cfg: RunConfig, out: Path) -> str:
    samples = _dataset(args.dataset)
    if args.model != "template":
        model = train_baseline(samples, args.model, cfg, log_path=out / "metrics.csv", progress=_progress)
        path = save_checkpoint(model, cfg.model, out / "model.pt")
        _record(cfg, out, args, dataset=args.dataset, checkpoint=path)
        return f"wrote {path}"
    library = load_library(_exists(args.library, "library"))
    teacher = None
    if args.teacher:
        teacher, _ = load_checkpoint(_exists(args.teacher, "teacher checkpoint"), library, expect="teacher")
    elif cfg.loss.lambda_dis > 0:
        log.warning("no --teacher given; the distillation term is skipped")
    res = train(samples, library, cfg, teacher=teacher, log_path=out / "metrics.csv", progress=_progress)
    path = save_checkpoint(res.model, res.model.cfg, out / "model.pt", library)
    if res.disc is not None:
        torch.save(res.disc.state_dict(), out / "discriminator.pt")
    np.savez_compressed(out / "labels.npz", labels=res.labels.labels, gt_index=res.labels.gt_index,
                        train_idx=res.train_idx)
    _write_json(out / "summary.json", {
        "stages": len(res.stage_accuracy),
        "holdout_accuracy": res.stage_accuracy,
        "mined_labels": int(res.labels.labels.sum() - len(res.labels.labels)),
    })
    _record(cfg, out, args, dataset=args.dataset, library=args.library, teacher=args.teacher, checkpoint=path)
    return f"trained {len(res.stage_accuracy)} stage(s); wrote {path}"


def cmd_eval(args, cfg: RunConfig, out: Path) -> str:
    samples = _dataset(args.dataset)
    if any(k <= 0 for k in args.ks):
        raise CliError("--ks values must be positive")
    if args.predictions:
        report = score_prediction_file(_exists(args.predictions, "predictions"), samples, args.ks,
                                       args.method or "external")
    else:
        model = _load_model(args)
        preds = predict(model, samples)
        save_predictions(preds, out / "predictions.jsonl")
        ks = [k for k in args.ks if k <= len(preds[0].scores)] or [1]
        report = evaluate_predictions(preds, [s.gt_pose for s in samples], [s.height for s in samples], ks,
                                      args.method or "model")
    report.write(out)
    _record(cfg, out, args, dataset=args.dataset, checkpoint=args.checkpoint, predictions=args.predictions)
    return report.table()


def cmd_infer(args, cfg: RunConfig, out: Path) -> str:
    image = load_png(_exists(args.image, "image"))
    h, w = image.shape[:2]
    sample = SceneSample(image=image, target=(args.target_x, args.target_y), gt_pose=None, sample_id="query")
    model = _load_model(args)
    pred = predict(model, [sample])[0]
    order = np.argsort(-pred.scores, kind="stable")[: max(1, args.top_k)]
    result = [{"rank": r, "template": int(i), "score": float(pred.scores[i]), "pose": pred.poses[i].tolist()}
              for r, i in enumerate(order)]
    _write_json(out / "poses.json", {"image": str(args.image), "target": [args.target_x, args.target_y],
                                     "size": [w, h], "poses": result})
    overlay = render_pose_overlay(image, [pred.poses[i] for i in order], [pred.scores[i] for i in order],
                                  out / "overlay.png", upscale=args.upscale)
    _record(cfg, out, args, image=args.image, checkpoint=args.checkpoint)
    lines = [f"#{r['rank'] + 1} template {r['template']} score {r['score']:.3f}" for r in result]
    return "\n".join(lines + [f"overlay: {overlay}"])


def cmd_study_templates(args, cfg: RunConfig, out: Path) -> str:
    samples = _dataset(args.dataset)
    if args.test_dataset:
        train_set, test_set = samples, _dataset(args.test_dataset)
    else:
        rng = np.random.default_rng([cfg.optim.seed, 11])
        perm = rng.permutation(len(samples))
        n_test = max(1, len(samples) // 5)
        test_set = [samples[i] for i in sorted(perm[:n_test])]
        train_set = [samples[i] for i in sorted(perm[n_test:])]
    if not args.k_primes and not args.k_list:
        raise CliError("nothing to study: give --k-primes and/or --k-list")
    bad = [k for k in args.k_list if k > cfg.templates.k_prime]
    if bad:
        raise CliError(f"--k-list values {bad} exceed --k-prime {cfg.templates.k_prime}")
    result = template_study(train_set, test_set, cfg, args.k_primes, args.k_list, progress=_progress)
    (out / "study.csv").write_text(result.to_csv())
    for col, rep in zip(result.columns, result.reports):
        rep.write(out / col.replace("'", "p"))
    _record(cfg, out, args, dataset=args.dataset, test_dataset=args.test_dataset)
    return result.to_csv().rstrip()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-templates": cmd_build_templates,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "study-templates": cmd_study_templates,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = run_dir(args)
        message = COMMANDS[args.command](args, cfg, out)
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        text = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"affordpose {args.command}: error: {text}", file=sys.stderr)
        return 1
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
