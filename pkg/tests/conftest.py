import pytest

from affordpose.config import desk_config
from affordpose.experiments import library_for, world_split
from affordpose.training import scene_tensors

TINY_MODEL = {"input_size": 32, "feature_size": 8, "channels": 16, "embed_dim": 16, "ffn_dim": 32,
              "mlp_hidden": 32, "disc_hidden": 32, "backbone_widths": [8, 8, 16, 16]}


def tiny_config(**sections):
    """Desk preset shrunk to a 32 px model; ``sections`` update it."""
    cfg = desk_config()
    cfg.update({"model": TINY_MODEL})
    cfg.update(sections)
    return cfg


@pytest.fixture(scope="session")
def tiny_world():
    cfg = tiny_config()
    train_set, test_set = world_split(cfg, 300, 100)
    library = library_for(train_set, cfg)
    return train_set, test_set, library, scene_tensors(train_set, library)


# acceptance criteria report: one line per criterion in the terminal summary

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        prev = _CRITERIA.get(number, (title, "PASS"))[1]
        _CRITERIA[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status} - {title}")
