import time

import pytest

from pixelforge.align import TrainConfig
from pixelforge.pipeline import cmd_eval, cmd_train_align, write_dataset
from pixelforge.synthetic import planted_dataset

# desk-scale settings for the planted end-to-end run: 64 px tiles at a 16x16 feature grid
PLANTED_CONFIG = dict(d=64, grid_h=16, grid_w=16, lr=0.01, max_steps=1000, seed=42)

# one "PASS/FAIL criterion N: ..." line per acceptance check, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def planted_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("planted")
    return write_dataset(planted_dataset(n_compositions=32, n_tiles=256), out)


@pytest.fixture(scope="session")
def planted_run(planted_manifest, tmp_path_factory):
    """Train on the planted dataset once and evaluate retrieval and tags on its test split."""
    out = tmp_path_factory.mktemp("planted_run")
    cfg = TrainConfig(**PLANTED_CONFIG)
    start = time.perf_counter()
    params, losses = cmd_train_align(planted_manifest, out, cfg)
    seconds = time.perf_counter() - start
    report = cmd_eval(planted_manifest, out / "checkpoint.pxfb", ["retrieval", "tags"])
    return {"out": out, "params": params, "losses": losses, "report": report, "cfg": cfg, "seconds": seconds}


@pytest.fixture(scope="session")
def untrained_run(planted_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("untrained_run")
    cfg = TrainConfig(**{**PLANTED_CONFIG, "max_steps": 0})
    params, _ = cmd_train_align(planted_manifest, out, cfg)
    report = cmd_eval(planted_manifest, out / "checkpoint.pxfb", ["retrieval"])
    return {"out": out, "params": params, "report": report}
