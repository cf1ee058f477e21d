import json
import re
import time

import pytest

from suma_lab.concept_world import NearestCentroid, build_universe, by_id
from suma_lab.config import RunConfig
from suma_lab.pipeline import Run
from suma_lab.toy_t2i import ModelDims, build_model

# acceptance results collected by test_acceptance.py, printed at the end
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def universe():
    return build_universe(0)


@pytest.fixture(scope="session")
def ids(universe):
    return by_id(universe)


@pytest.fixture(scope="session")
def clf(universe):
    return NearestCentroid(universe)


@pytest.fixture(scope="session")
def small_dims():
    return ModelDims(d_text=8, layer_dims=(4, 6), hidden=8, mlp=12, timesteps=10, max_len=10)


@pytest.fixture(scope="session")
def small_model(universe, small_dims):
    """Untrained small model for gradient and plumbing tests."""
    return build_model(universe, small_dims, seed=3)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Default-config pipeline plus every ablation preset (about a minute)."""
    cfg = RunConfig()
    run = Run(cfg, tmp_path_factory.mktemp("default"))
    t0 = time.perf_counter()
    run.execute(["pretrain"])
    t_pre = time.perf_counter() - t0
    run.execute(cfg.stages)
    t_full = time.perf_counter() - t0
    report = run.path("report.json").read_bytes()
    run.execute([], cfg.ablations)
    # report again now that the ablation tables exist (resume recomputes only the report)
    run.path("report.json").unlink()
    run.execute(cfg.stages)
    return {"run": run, "t_pretrain": t_pre, "t_full": t_full, "report_before_ablation": report,
            "report": json.loads(run.path("report.json").read_text())}


TINY = {
    "model": {"d_text": 8, "layer_dims": [6, 6], "hidden": 8, "mlp": 12, "timesteps": 10},
    "pretrain": {"steps": 30, "batch": 16, "n_eval": 8},
    "ti": {"steps": 80, "batch": 4, "n_images": 8},
    "erasure": {"l": 2, "elimination_steps": 5, "subclass_steps": 5, "ca_steps": 3, "batch": 4},
    "attack": {"n_eval": 8, "n_images": 8, "cce_steps": 5, "ud_steps": 3, "ud_batch": 4},
    "metrics": {"n_fid": 8},
    "multi": {"simultaneous_steps": 5, "concepts": ["springer", "elon"]},
}


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a YAML config that runs the whole pipeline in a couple of seconds."""
    import yaml
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p
