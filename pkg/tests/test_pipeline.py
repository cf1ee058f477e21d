import json

import numpy as np
import pytest

from suma_lab import cli
from suma_lab.config import ConfigInvalid, load
from suma_lab.pipeline import (LOCK, MANIFEST, Run, ablation_grid, check_report, derive_seed,
                               requirements, run_pipeline, sha256_file)


def test_derive_seed():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(1, "a") != derive_seed(0, "b")
    assert requirements("attack") == ["pretrain", "construct", "eliminate", "attack"]


def test_pretrain_only(tiny_config, tmp_path):
    out = tmp_path / "run"
    ran = run_pipeline(load(tiny_config), out, ["pretrain"])
    assert ran == {"pretrain": "ran"}
    rep = json.loads((out / "pretrain.json").read_text())
    assert set(rep) >= {"accuracy", "min_accuracy", "loss_first", "loss_last"}
    man = json.loads((out / MANIFEST).read_text())
    assert man["stages"]["pretrain"]["model.suma"] == sha256_file(out / "model.suma")
    assert not (out / LOCK).exists()


def test_full_run_resume_and_determinism(tiny_config, tmp_path):
    cfg = load(tiny_config)
    a, b = tmp_path / "a", tmp_path / "b"
    ran = run_pipeline(cfg, a)
    assert set(ran.values()) == {"ran"}
    for name in ("model.suma", "construct.suma", "erased.suma", "attacks.json", "metrics.json",
                 "report.json", "eliminate_0.csv"):
        assert (a / name).exists()
    # every artifact is listed in the manifest with its hash
    man = json.loads((a / MANIFEST).read_text())
    listed = {f for files in man["stages"].values() for f in files}
    assert listed == {p.name for p in a.iterdir() if p.name != MANIFEST}
    # resume: everything cached; deleting the report recomputes only the report
    assert set(run_pipeline(cfg, a).values()) == {"cached"}
    before = (a / "report.json").read_bytes()
    (a / "report.json").unlink()
    ran = run_pipeline(cfg, a)
    assert ran["report"] == "ran" and all(v == "cached" for k, v in ran.items() if k != "report")
    assert (a / "report.json").read_bytes() == before
    # a fresh directory gives a byte-identical report
    run_pipeline(cfg, b)
    assert (b / "report.json").read_bytes() == before
    rep = json.loads(before)
    assert rep["metrics"]["config_fingerprint"] == cfg.fingerprint()
    assert len(check_report(rep)) == 3 + len(rep["distances"])


def test_config_change_invalidates(tiny_config, tmp_path):
    cfg = load(tiny_config)
    run_pipeline(cfg, tmp_path / "r", ["pretrain"])
    cfg.pretrain.steps = 31
    assert run_pipeline(cfg, tmp_path / "r", ["pretrain"]) == {"pretrain": "ran"}


def test_ablation_grid(tiny_config, tmp_path):
    cfg = load(tiny_config)
    with pytest.raises(ConfigInvalid):
        ablation_grid(cfg, tmp_path / "r", [])
    ran = ablation_grid(cfg, tmp_path / "r", ["lambda_reg_on_off"])
    assert ran["ablate:lambda_reg_on_off"] == "ran"
    lines = (tmp_path / "r" / "ablation_lambda_reg_on_off.csv").read_text().splitlines()
    assert lines[0] == "variant,asr_textual,asr_cce,asr_cce_max,asr_ud,toy_fid,toy_clip"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["lambda_reg_1", "lambda_reg_0"]


def test_unknown_concept(tiny_config, tmp_path):
    cfg = load(tiny_config)
    cfg.concepts = ["dog"]  # no parent
    with pytest.raises(ConfigInvalid):
        Run(cfg, tmp_path)
    cfg.concepts = ["unicorn"]
    with pytest.raises(ConfigInvalid):
        Run(cfg, tmp_path)


# ---------------------------------------------------------------------------
# CLI exit codes


def test_cli_ok_and_seed(tiny_config, tmp_path, capsys):
    assert cli.main(["pretrain", "--config", str(tiny_config), "--out", str(tmp_path / "r"),
                     "--seed", "3"]) == 0
    assert "pretrain: ran" in capsys.readouterr().out
    rep = json.loads((tmp_path / "r" / "pretrain.json").read_text())
    assert rep["steps"] == 30


def test_cli_config_errors(tiny_config, tmp_path):
    out = str(tmp_path / "r")
    assert cli.main(["pretrain", "--config", str(tmp_path / "nope.yaml"), "--out", out]) == 2
    assert cli.main(["pretrain", "--config", str(tiny_config), "--out", out,
                     "--stage-override", "erasure.lamda=1"]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["fly", "--out", out])
    assert e.value.code == 2
    assert cli.main(["ablate", "--config", str(tiny_config), "--out", out,
                     "--stage-override", "ablations=[]"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_stage_failure_and_lock(tiny_config, tmp_path):
    out = tmp_path / "r"
    # an absurd learning rate makes pretraining diverge
    code = cli.main(["pretrain", "--config", str(tiny_config), "--out", str(out),
                     "--stage-override", "pretrain.lr=1.0e+300"])
    assert code == 3
    (out / LOCK).write_text("1")
    assert cli.main(["pretrain", "--config", str(tiny_config), "--out", str(out)]) == 3


def test_cli_check(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "r")
    code = cli.main(["report", "--config", str(tiny_config), "--out", out, "--check"])
    text = capsys.readouterr().out
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    ok = all(p for _, p, _ in check_report(rep))
    assert code == (0 if ok else 4)
    assert ("[FAIL]" in text) == (not ok)
    assert np.isfinite(rep["metrics"]["toy_fid"])
