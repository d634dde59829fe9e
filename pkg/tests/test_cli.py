import json
import time

import pytest

from affordpose.cli import main
from affordpose.templates import load_library

from conftest import TINY_MODEL

TINY_FLAGS = [
    "--input-size", "32", "--feature-size", "8", "--channels", "16", "--embed-dim", "16", "--ffn-dim", "32",
    "--mlp-hidden", "32", "--disc-hidden", "32", "--backbone-widths", "8,8,16,16",
]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "train"
    assert run("gen-data", "--preset", "desk", "--n", 200, "--out", out) == 0
    return out


def test_full_pipeline_smoke(dataset, tmp_path, capsys):
    t0 = time.perf_counter()
    common = ["--preset", "desk", *TINY_FLAGS, "--epochs-per-stage", "2", "--max-epochs", "2"]
    test_dir = tmp_path / "test"
    assert run("gen-data", "--preset", "desk", "--n", 40, "--start", 500_000, "--out", test_dir) == 0
    lib_dir = tmp_path / "lib"
    assert run("build-templates", "--preset", "desk", "--dataset", dataset, "--out", lib_dir) == 0
    library = lib_dir / "library.json"
    assert run("pretrain-teacher", *common, "--teacher-epochs", "2", "--dataset", dataset,
               "--library", library, "--out", tmp_path / "teacher") == 0
    assert run("train", *common, "--dataset", dataset, "--library", library,
               "--teacher", tmp_path / "teacher" / "teacher.pt", "--out", tmp_path / "model") == 0
    assert run("train", *common, "--model", "regression", "--dataset", dataset, "--out", tmp_path / "reg") == 0
    assert run("eval", "--dataset", test_dir, "--checkpoint", tmp_path / "model" / "model.pt", "--ks", "1,3",
               "--out", tmp_path / "eval") == 0
    report = (tmp_path / "eval" / "report.csv").read_text().splitlines()
    assert report[0] == "method,k,pck,mse" and len(report) == 3
    for line in report[1:]:
        method, k, pck, mse = line.split(",")
        assert 0 <= float(pck) <= 1 and float(mse) >= 0
    # the prediction dump can be re-scored as an external method
    assert run("eval", "--dataset", test_dir, "--predictions", tmp_path / "eval" / "predictions.jsonl",
               "--ks", "1,3", "--out", tmp_path / "eval2") == 0
    assert (tmp_path / "eval2" / "report.csv").read_text().replace("external", "model") == "\n".join(report) + "\n"
    assert run("eval", "--dataset", test_dir, "--checkpoint", tmp_path / "reg" / "model.pt", "--ks", "1",
               "--out", tmp_path / "eval_reg") == 0
    image = next((test_dir / "images").glob("*.png"))
    assert run("infer", "--image", image, "--target-x", 60, "--target-y", 70, "--checkpoint",
               tmp_path / "model" / "model.pt", "--top-k", 2, "--out", tmp_path / "infer") == 0
    poses = json.loads((tmp_path / "infer" / "poses.json").read_text())["poses"]
    assert len(poses) == 2 and poses[0]["score"] >= poses[1]["score"]
    assert (tmp_path / "infer" / "overlay.png").exists()
    assert time.perf_counter() - t0 < 300
    for d in ("lib", "teacher", "model", "reg", "eval", "infer"):
        cfg = json.loads((tmp_path / d / "run_config.json").read_text())
        assert cfg["model"] and cfg["optim"] and cfg["paths"]["run_dir"] == str(tmp_path / d)
    capsys.readouterr()


def test_k_equal_k_prime_keeps_all_centers(dataset, tmp_path):
    assert run("build-templates", "--dataset", dataset, "--k-prime", 6, "--k", 6, "--out", tmp_path) == 0
    lib = load_library(tmp_path / "library.json")
    assert lib.K == 6 and lib.selection == list(range(6))


def test_loss_ablation_flags_reach_the_config(dataset, tmp_path):
    assert run("build-templates", "--preset", "desk", "--dataset", dataset, "--out", tmp_path / "lib") == 0
    assert run("train", "--preset", "desk", *TINY_FLAGS, "--max-epochs", "1", "--lambda-adv", "0",
               "--lambda-dis", "0", "--dataset", dataset, "--library", tmp_path / "lib" / "library.json",
               "--out", tmp_path / "run") == 0
    cfg = json.loads((tmp_path / "run" / "run_config.json").read_text())
    assert cfg["loss"]["lambda_adv"] == 0 and cfg["loss"]["lambda_dis"] == 0
    assert not (tmp_path / "run" / "discriminator.pt").exists()


def test_config_file_then_flags(tmp_path, dataset):
    conf = tmp_path / "run.toml"
    conf.write_text('[templates]\nk_prime = 5\nk = 3\n\n[optim]\nseed = 4\n')
    assert run("build-templates", "--dataset", dataset, "--config", conf, "--k", 2, "--out", tmp_path / "o") == 0
    cfg = json.loads((tmp_path / "o" / "run_config.json").read_text())
    assert (cfg["templates"]["k_prime"], cfg["templates"]["k"], cfg["optim"]["seed"]) == (5, 2, 4)


def test_run_reproducible_from_saved_config(tmp_path):
    assert run("gen-data", "--n", 3, "--world-seed", 9, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--n", 3, "--config", tmp_path / "a" / "run_config.json", "--out", tmp_path / "b") == 0
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()


def test_default_run_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("AFFORDPOSE_OUT", str(tmp_path / "root"))
    assert run("gen-data", "--n", 1) == 0
    (made,) = (tmp_path / "root").iterdir()
    assert made.name.startswith("gen-data-") and (made / "run_config.json").exists()


def test_inputs_are_not_mutated(dataset, tmp_path):
    before = {p: p.read_bytes() for p in dataset.rglob("*") if p.is_file()}
    assert run("build-templates", "--dataset", dataset, "--out", tmp_path) == 0
    assert before == {p: p.read_bytes() for p in dataset.rglob("*") if p.is_file()}


@pytest.mark.parametrize("argv, code", [
    (["train", "--dataset", "/nonexistent", "--library", "x.json"], 1),
    (["eval", "--dataset", "/nonexistent", "--checkpoint", "m.pt"], 1),
    (["gen-data", "--n", "0"], 1),
    (["gen-data", "--n", "5", "--config", "/nonexistent.toml"], 1),
    (["gen-data"], 2),
    (["gen-data", "--n", "2", "--jitter", "abc"], 2),
    (["frobnicate"], 2),
])
def test_errors_give_single_line_diagnostics(argv, code, tmp_path, capsys):
    if code == 2:
        with pytest.raises(SystemExit) as exc:
            main(argv + ["--out", str(tmp_path)])
        assert exc.value.code == 2
    else:
        assert main(argv + ["--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "error" in err[0]


def test_study_templates_bad_k(dataset, tmp_path, capsys):
    assert run("study-templates", "--dataset", dataset, "--k-prime", 5, "--k-list", "7", "--out", tmp_path) == 1
    assert "exceed" in capsys.readouterr().err


def test_tiny_model_flags_match_shared_config():
    assert TINY_FLAGS[1::2][:-1] == [str(v) for k, v in TINY_MODEL.items() if k != "backbone_widths"]
