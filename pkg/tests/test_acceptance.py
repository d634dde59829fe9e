"""Acceptance suite.  Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion.

The training criteria (6, 7, 8) run full desk-scale experiments and take
most of the suite's wall time.
"""

import csv
import io
import math
import time

import numpy as np
import pytest
import torch

from affordpose.cli import main
from affordpose.config import LossWeights, desk_config
from affordpose.evaluation import SamplePrediction, evaluate_predictions, mse, pck
from affordpose.experiments import desk_benchmark, distillation_ablation, evaluate_model, mining_analysis
from affordpose.losses import loss_adv, loss_cls, loss_dis, loss_offset, loss_scale, total_loss
from affordpose.model import Discriminator, TemplatePoseNet, Teacher
from affordpose.pose import LEFT_HIP, RIGHT_SHOULDER, UNIT_BOX, enclosing_box, normalize, refine
from affordpose.templates import clustering_objective, kmeans
from affordpose.training import compute_parts, self_training_update

from conftest import TINY_MODEL, tiny_config


def report(line):
    print(line, flush=True)


# -- 1 -------------------------------------------------------------------------------


@pytest.mark.criterion(1, "pose algebra suite")
def test_pose_algebra_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst_idem = worst_box = 0.0
    for _ in range(1000):
        p = rng.uniform(-500, 500, (16, 2)) * rng.uniform(0.01, 10, 2)
        n = normalize(p)
        worst_idem = max(worst_idem, float(np.abs(normalize(n) - n).max()))
        worst_box = max(worst_box, float(np.abs(np.subtract(enclosing_box(n).as_tuple(), UNIT_BOX.as_tuple())).max()))
    worst_range = 0.0
    for _ in range(1000):
        t = normalize(rng.normal(size=(16, 2)))
        d = rng.uniform(-0.5, 0.5, 32)
        s = rng.uniform(0, 2, 2)
        worst_range = max(worst_range, float(np.abs(refine(t, d, s)).max()))
    elapsed = time.perf_counter() - t0
    report(f"idempotence {worst_idem:.2e}, box {worst_box:.2e}, refine max |x| {worst_range:.4f}, {elapsed:.2f}s")
    assert worst_idem <= 1e-9
    assert worst_box <= 1e-6
    assert worst_range <= 1.0
    assert elapsed < 10


# -- 2 -------------------------------------------------------------------------------


def _pck_loop(pred, gt, alpha=0.2):
    torso = math.dist(gt[LEFT_HIP], gt[RIGHT_SHOULDER])
    return sum(math.dist(pred[m], gt[m]) <= alpha * torso for m in range(16)) / 16


def _mse_loop(pred, gt, h):
    return sum((pred[m][a] / h - gt[m][a] / h) ** 2 for m in range(16) for a in range(2)) / 32


def _assert_topk_monotone(rep):
    ks = sorted(rep.ks)
    for a, b in zip(ks, ks[1:]):
        assert rep.pck[a] <= rep.pck[b]
        assert rep.mse[a] >= rep.mse[b]


@pytest.mark.criterion(2, "metric oracles")
def test_metric_oracles(tiny_world):
    rng = np.random.default_rng(200)
    worst = 0.0
    for _ in range(100):
        gt = rng.uniform(0, 300, (16, 2))
        pred = gt + rng.normal(scale=rng.uniform(1, 40), size=(16, 2))
        h = rng.uniform(50, 500)
        assert pck(pred, gt) == pytest.approx(_pck_loop(pred, gt), abs=1e-9)
        worst = max(worst, abs(mse(pred, gt, h) - _mse_loop(pred, gt, h)))
    assert worst <= 1e-9
    # boundary: torso 5, threshold exactly 1
    gt = rng.uniform(-20, 20, (16, 2))
    gt[LEFT_HIP], gt[RIGHT_SHOULDER] = (0.0, 0.0), (3.0, 4.0)
    assert pck(gt + [0.0, 1.0], gt) == 1.0
    # top-k monotonicity on every dataset evaluated here
    train_set, test_set, library, _ = tiny_world
    torch.manual_seed(0)
    model = TemplatePoseNet(tiny_config().model, library.templates).eval()
    reports = [evaluate_model(model, test_set), evaluate_model(model, train_set[:100])]
    for seed in range(5):
        r = np.random.default_rng(seed)
        gts = [r.uniform(0, 100, (16, 2)) for _ in range(50)]
        preds = [SamplePrediction(str(i), r.uniform(size=8), g + r.normal(scale=12, size=(8, 16, 2)))
                 for i, g in enumerate(gts)]
        reports.append(evaluate_predictions(preds, gts, [100.0] * 50))
    for rep in reports:
        _assert_topk_monotone(rep)
    report(f"pck/mse loop oracles: worst mse diff {worst:.1e}; top-k monotone on {len(reports)} datasets")


# -- 3 -------------------------------------------------------------------------------


@pytest.mark.criterion(3, "K-means fixed point")
def test_kmeans_fixed_point():
    rng = np.random.default_rng(300)
    x = np.stack([normalize(rng.normal(size=(16, 2))) for _ in range(400)])
    worst = 0.0
    for seed in range(10):
        res = kmeans(x, 12, seed=seed)
        for j in range(12):
            worst = max(worst, float(np.abs(res.centers[j] - x[res.labels == j].mean(0)).max()))
        assert all(b <= a + 1e-12 for a, b in zip(res.objective, res.objective[1:]))
        assert clustering_objective(x, res.centers) == pytest.approx(res.objective[-1], abs=1e-9)
    report(f"10 seeded runs: worst center-vs-mean gap {worst:.1e}")
    assert worst <= 1e-9


# -- 4 -------------------------------------------------------------------------------


def _clip(p):
    return min(max(p, 1e-7), 1 - 1e-7)


@pytest.mark.criterion(4, "loss formula oracles")
def test_loss_formula_oracles():
    rng = np.random.default_rng(400)
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    worst = 0.0
    for _ in range(20):
        c, l, w = rng.uniform(size=14), rng.integers(0, 2, 14), rng.uniform(0.1, 4, 14)
        want = sum(-(wi * li * math.log(_clip(ci)) + (1 - li) * math.log(1 - _clip(ci)))
                   for ci, li, wi in zip(c, l, w)) / 14
        worst = max(worst, abs(float(loss_cls(t(c), t(l), t(w))) - want))

        tpl = normalize(rng.normal(size=(16, 2)))
        d = rng.uniform(-0.5, 0.5, 32)
        gt = rng.normal(size=(16, 2)) * 40
        a, b = normalize(tpl + d.reshape(16, 2)).ravel(), normalize(gt).ravel()
        want = sum((x - y) ** 2 for x, y in zip(a, b))
        worst = max(worst, abs(float(loss_offset(t(d), t(tpl), t(gt))) - want))

        s, s_star = rng.uniform(0, 2, 2), rng.uniform(0, 2, 2)
        want = (s[0] - s_star[0]) ** 2 + (s[1] - s_star[1]) ** 2
        worst = max(worst, abs(float(loss_scale(t(s), t(s_star))) - want))

        u, v = rng.normal(size=32), rng.normal(size=32)
        want = sum((x - y) ** 2 for x, y in zip(u, v))
        worst = max(worst, abs(float(loss_dis(t(u), t(v))) - want))

        d_gt, d_o = rng.uniform(size=5), rng.uniform(size=(5, 4))
        mask = rng.integers(0, 2, (5, 4)).astype(bool)
        mask[0, 1] = True
        fakes = [_clip(p) for p, m in zip(d_o.ravel(), mask.ravel()) if m]
        want = sum(math.log(_clip(p)) for p in d_gt) / 5 + sum(math.log(1 - p) for p in fakes) / len(fakes)
        worst = max(worst, abs(float(loss_adv(t(d_gt), t(d_o), torch.as_tensor(mask)).value) - want))

        parts = dict(zip(("cls", "offset", "scale", "adv", "dis"), rng.uniform(0, 2, 5)))
        want = parts["cls"] + 10 * (parts["offset"] + parts["scale"] + parts["adv"]) + parts["dis"]
        worst = max(worst, abs(float(total_loss(parts, LossWeights())) - want))
    unit = total_loss(dict.fromkeys(("cls", "offset", "scale", "adv", "dis"), 1.0), LossWeights())
    report(f"worst |loss - loop oracle| {worst:.1e}; unit-parts total {unit}")
    assert worst <= 1e-9
    assert unit == 32


# -- 5 -------------------------------------------------------------------------------

GRAD_GROUPS = ("encoder.backbone", "encoder.decoder", "fuse", "classifier", "queries", "scale_proj",
               "scale_decoder", "scale_head", "offset_proj", "offset_decoder", "offset_head")


class ReplayTeacher(torch.nn.Module):
    """Returns the wrapped teacher's first output forever after.

    The distillation target is held constant by design (its heatmaps follow the
    predicted scale without carrying gradient), so the finite differences must
    see it fixed at the base point too.
    """

    def __init__(self, teacher):
        super().__init__()
        self.teacher = teacher
        self.cached = None

    def forward(self, image, heatmaps):
        if self.cached is None:
            self.cached = self.teacher(image, heatmaps)
        return self.cached


@pytest.mark.criterion(5, "end-to-end gradient check")
def test_gradient_check(tiny_world):
    t0 = time.perf_counter()
    _, _, library, data = tiny_world
    cfg = tiny_config()
    torch.manual_seed(5)
    model = TemplatePoseNet(cfg.model, library.templates).double().eval()
    teacher = ReplayTeacher(Teacher(cfg.model).double().eval())
    disc = Discriminator(cfg.model).double().eval()
    # move off the initialization: zero BN biases put many ReLUs exactly on their kink
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.02 * torch.randn_like(p))
    b = np.arange(4)
    crops = data.crops(b, cfg.model.input_size).double()
    labels = torch.ones(4, len(library), dtype=torch.float64)
    cw = torch.full((len(library),), 0.5, dtype=torch.float64)
    weights = LossWeights()

    def loss_fn():
        _, parts, _, _ = compute_parts(model, crops, data.gt_index[b], data.gt_norm[b].double(),
                                       data.gt_scale[b].double(), labels, cw, weights, teacher, disc)
        assert set(parts) == {"cls", "offset", "scale", "dis", "adv"}
        return total_loss(parts, weights)

    model.zero_grad()
    loss_fn().backward()
    named = dict(model.named_parameters())
    rng = np.random.default_rng(55)
    checks = []
    for group in GRAD_GROUPS:
        names = [n for n in named if n.startswith(group)]
        assert names, group
        for _ in range(2):
            name = names[rng.integers(len(names))]
            g = named[name].grad.reshape(-1)
            # entries with a resolvable gradient: at least 10% of the tensor's largest
            live = torch.nonzero(g.abs() >= 0.1 * g.abs().max()).reshape(-1)
            checks.append((name, int(live[rng.integers(len(live))])))
    # central differences are taken inside one smooth piece: the step shrinks
    # until no ReLU switches between the base point and either side
    patterns = []
    hooks = [m.register_forward_hook(lambda _m, _i, out: patterns.append(out > 0))
             for net in (model, teacher, disc) for m in net.modules() if isinstance(m, torch.nn.ReLU)]

    def evaluate():
        patterns.clear()
        value = float(loss_fn().detach())
        return value, [t.clone() for t in patterns]

    _, base = evaluate()
    worst = 0.0
    for name, idx in checks:
        p = named[name].data.reshape(-1)
        analytic = float(named[name].grad.reshape(-1)[idx])
        orig = float(p[idx])
        h = 1e-6
        with torch.no_grad():
            while True:
                p[idx] = orig + h
                up, pat_up = evaluate()
                p[idx] = orig - h
                down, pat_down = evaluate()
                p[idx] = orig
                if h < 1e-9 or all(torch.equal(a, b) and torch.equal(a, c) for a, b, c in zip(base, pat_up, pat_down)):
                    break
                h /= 4
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
        worst = max(worst, rel)
        assert rel <= 1e-3, (name, idx, h, analytic, numeric)
    for hook in hooks:
        hook.remove()
    elapsed = time.perf_counter() - t0
    report(f"{len(checks)} parameters over {len(GRAD_GROUPS)} submodules: worst relative error {worst:.2e}, "
           f"{elapsed:.1f}s")
    assert len(checks) >= 20
    assert elapsed < 300


# -- 6 -------------------------------------------------------------------------------


@pytest.mark.criterion(6, "desk-scale training vs regression baseline")
def test_desk_scale_training():
    cfg = desk_config()
    result = desk_benchmark(cfg, n_train=2000, n_test=500, progress=report)
    report(f"test accuracy {result.accuracy:.3f}; Top-1 PCK ours {result.ours.pck[1]:.3f} vs regression "
           f"{result.regression.pck[1]:.3f} (margin {result.pck_margin:+.3f}); {result.seconds:.0f}s "
           f"{ {k: round(v) for k, v in result.timings.items()} }")
    _assert_topk_monotone(result.ours)
    assert result.accuracy >= 0.9
    assert result.pck_margin >= 0.05
    assert result.seconds <= 1800


# -- 7 -------------------------------------------------------------------------------


@pytest.mark.criterion(7, "distillation ablation")
def test_distillation_ablation():
    cfg = desk_config()
    result = distillation_ablation(cfg, seeds=(0, 1, 2), n_train=1000, n_val=200, progress=report)
    report(f"validation offset loss with distillation {result.mean_with:.5f} "
           f"vs without {result.mean_without:.5f} (per seed {result.with_dis} / {result.without_dis})")
    assert result.mean_with <= result.mean_without


# -- 8 -------------------------------------------------------------------------------


@pytest.mark.criterion(8, "self-training label mining")
def test_self_training_mining():
    cfg = desk_config(world={"ambiguity_rate": 0.3},
                      optim={"max_stages": 2, "epochs_per_stage": 20, "max_epochs": 0})
    res = mining_analysis(cfg, n_train=2000, progress=report)
    state = res.labels
    history = state.history
    for prev, nxt in zip(history, history[1:]):
        assert np.all(nxt >= prev)
    for labels in history:
        assert np.all(labels[np.arange(len(labels)), state.gt_index] == 1)
    assert state.stage == len(history) - 1
    again = self_training_update(res.training.model, res.data, state, cfg.optim.threshold, res.training.train_idx)
    report(f"{state.stage} mining passes; mined {res.secondary_mined}/{res.secondary_total} admissible "
           f"secondary families ({res.mined_fraction:.3f}); repeat pass changed {again.changed}")
    assert again.changed == 0
    assert state.stage == 2
    assert res.mined_fraction >= 0.5


# -- 9 -------------------------------------------------------------------------------


@pytest.mark.criterion(9, "template-count study harness")
def test_template_count_study(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--preset", "desk", "--n", "300", "--out", str(data)]) == 0
    flags = ["--preset", "desk", "--k-prime", "30", "--epochs-per-stage", "1", "--max-epochs", "1"]
    for key, value in TINY_MODEL.items():
        flags += ["--" + key.replace("_", "-"), ",".join(map(str, value)) if isinstance(value, list) else str(value)]
    out = tmp_path / "study"
    assert main(["study-templates", "--dataset", str(data), "--k-list", "7,10,14,20", *flags,
                 "--out", str(out)]) == 0
    rows = list(csv.reader(io.StringIO((out / "study.csv").read_text())))
    report("\n".join(",".join(r) for r in rows))
    assert rows[0] == ["# templates", "K7", "K10", "K14", "K20"]
    assert [r[0] for r in rows[1:]] == ["Top-3 PCK", "Top-5 PCK", "Top-3 MSE", "Top-5 MSE"]
    for r in rows[1:]:
        assert len(r) == 5 and all(math.isfinite(float(v)) for v in r[1:])
