import json
import os
from pathlib import Path

import numpy as np
import pytest

from cirsurrogate.core import ChannelParams, TimeGrid
from cirsurrogate.dataset import DesignBox, sample_params
from cirsurrogate.solver import DuctSolver, Mesh

ACCEPTANCE = []  # (criterion, ok, detail)


def record(k: int, title: str, ok: bool, detail: str = ""):
    ACCEPTANCE.append((k, title, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k, title, ok, detail in sorted(ACCEPTANCE):
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {k}. {title}: {detail}")


@pytest.fixture
def mid_params():
    return ChannelParams(D=1e-9, v_bar=2e-3, kappa=0.5, k_f=2.5e-6, k_r=0.2, B_tot=4e15, z_rx=2e-4, ell_z=2.5e-5)


@pytest.fixture(scope="session")
def draws20():
    return sample_params(DesignBox(), 20, seed=2024)


@pytest.fixture(scope="session")
def conservation_runs(draws20):
    """Default and 2x-refined solves of 20 draws: worst budget defect and h for each."""
    grid = TimeGrid()
    out = {"default": [], "refined": []}
    for p in draws20:
        for key, mesh in (("default", Mesh()), ("refined", Mesh().refined(2))):
            s = DuctSolver(p, mesh)
            wf = s.solve(grid)
            defect = max(abs(r[1] + r[2] + r[3] + r[4] - 1.0) for r in s.last_budget_rows)
            out[key].append((defect, wf.h, wf.meta["clamp"]))
    return out


def _pipeline(root: Path, seed: int):
    from cirsurrogate.cli import run

    cfg = root / "default.json"
    cfg.parent.mkdir(parents=True, exist_ok=True)
    from cirsurrogate.config import PipelineConfig, save_config

    save_config(PipelineConfig(workers=os.cpu_count() or 1), cfg)
    code = run(["pipeline", "--config", str(cfg), "--seed", str(seed), "--out", str(root / "run")])
    assert code == 0
    return root / "run"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("desk_a"), 7)


@pytest.fixture(scope="session")
def desk_run_repeat(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("desk_b"), 7)


@pytest.fixture(scope="session")
def desk_model(desk_run):
    from cirsurrogate.net import SurrogateModel

    return SurrogateModel.load(desk_run / "model.bundle")


@pytest.fixture(scope="session")
def desk_data(desk_run):
    from cirsurrogate.dataset import load

    return load(desk_run / "dataset")


def read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split(",")
    return head, [ln.split(",") for ln in lines[1:]]


def dump(obj, path):
    Path(path).write_text(json.dumps(obj))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
