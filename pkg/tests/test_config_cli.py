import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from cfcontrast.cli import main
from cfcontrast.config import ConfigError, ExperimentConfig
from cfcontrast.runner import Runner, parse_cell, select_cells

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"


def test_default_yaml_is_the_default():
    assert ExperimentConfig.load(ROOT / "configs" / "default.yaml").to_dict() == ExperimentConfig().to_dict()


def test_yaml_roundtrip():
    cfg = ExperimentConfig.load(SMOKE)
    assert ExperimentConfig.from_dict(yaml.safe_load(cfg.dump())).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc, key", [
    ({"pretrain": {"strategies": ["mixup"]}}, "pretrain.strategies"),
    ({"world": {"num_domains": 2}}, "domain_weights"),
    ({"cf_model": {"tier": "huge"}}, "cf_model.tier"),
    ({"eval": {"budgets": [0]}}, "eval.budgets"),
    ({"eval": {"subgroup_attribute": "age"}}, "subgroup_attribute"),
    ({"colour": 1}, "colour"),
    ({"cf_model": {"train": {"lr": 1, "momentum": 2}}}, "cf_model.train"),
])
def test_invalid_configs_name_the_key(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        ExperimentConfig.from_dict(doc)


def test_global_seed_fills_stage_seeds():
    cfg = ExperimentConfig.from_dict({"seed": 7})
    assert cfg.world.master_seed == 7 and cfg.cf_model.train.seed == 7
    cfg = ExperimentConfig.from_dict({"seed": 7, "world": {"master_seed": 1}})
    assert cfg.world.master_seed == 1


def test_cell_selection():
    cfg = ExperimentConfig()
    assert len(select_cells(cfg)) == 18
    assert select_cells(cfg, "cf_simclr_*") == ["cf_simclr_0", "cf_simclr_1", "cf_simclr_2"]
    assert select_cells(cfg, "standard_dino_1,plus_simclr_0") == ["plus_simclr_0", "standard_dino_1"]
    assert parse_cell("plus_dino_2") == ("plus", "dino", 2)


def test_bad_config_file_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("pretrain: {strategies: [mixup]}\n")
    assert main(["generate-world", "--config", str(bad), "--workspace", str(tmp_path / "ws")]) == 2
    assert main(["generate-world", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "cfcontrast.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("generate-world", "train-cf", "build-bank", "pretrain", "evaluate", "run-matrix", "plot", "report-diff"):
        assert cmd in out.stdout


@pytest.fixture(scope="module")
def smoke_ws(tmp_path_factory):
    ws = tmp_path_factory.mktemp("smoke")
    assert main(["run-matrix", "--config", str(SMOKE), "--workspace", str(ws)]) == 0
    return ws


def test_matrix_writes_every_report(smoke_ws):
    reports = sorted(p.name for p in (smoke_ws / "reports").glob("*_?.json"))
    assert reports == sorted(f"{c}.json" for c in select_cells(ExperimentConfig.load(SMOKE)))
    status = json.loads((smoke_ws / "reports" / "matrix_status.json").read_text())
    assert set(status.values()) == {"ok"}
    rep = json.loads((smoke_ws / "reports" / "cf_simclr_0.json").read_text())
    assert rep["schema_version"] == 1 and rep["soundness"]["referee"] == "oracle"
    assert set(rep["per_domain"]) == {"0.25", "1.0"} and rep["disparities"]
    diff = json.loads((smoke_ws / "reports" / "diff_vs_standard.json").read_text())
    assert diff["sign"] == "strategy minus baseline" and diff["rows"]


def test_matrix_rerun_reuses_cells(smoke_ws):
    ck = smoke_ws / "pretrain" / "cf_dino_0" / "encoder.ckpt"
    rep = smoke_ws / "reports" / "cf_dino_0.json"
    before = ck.stat().st_mtime_ns, rep.stat().st_mtime_ns
    assert main(["run-matrix", "--config", str(SMOKE), "--workspace", str(smoke_ws)]) == 0
    assert (ck.stat().st_mtime_ns, rep.stat().st_mtime_ns) == before


def test_changed_world_needs_force(smoke_ws, tmp_path):
    assert main(["generate-world", "--config", str(SMOKE), "--workspace", str(smoke_ws), "--seed", "5"]) == 2
    copy = tmp_path / "ws"
    import shutil
    shutil.copytree(smoke_ws / "world", copy / "world")
    assert main(["generate-world", "--config", str(SMOKE), "--workspace", str(copy), "--seed", "5", "--force"]) == 0
    assert json.loads((copy / "world" / "world.json").read_text())["master_seed"] == 5


def test_stage_order_enforced(tmp_path):
    ws = str(tmp_path / "ws")
    assert main(["evaluate", "--config", str(SMOKE), "--workspace", ws]) == 2
    assert main(["generate-world", "--config", str(SMOKE), "--workspace", ws]) == 0
    assert main(["build-bank", "--config", str(SMOKE), "--workspace", ws]) == 2
    assert main(["pretrain", "--config", str(SMOKE), "--workspace", ws, "--cells", "nothing_here"]) == 2


def test_plot_and_report_diff(smoke_ws, tmp_path):
    assert main(["plot", "--config", str(SMOKE), "--workspace", str(smoke_ws), "--output", str(tmp_path / "fig")]) == 0
    names = {p.name for p in (tmp_path / "fig").glob("*.png")}
    assert {"diff_simclr.png", "budget_dino_domain-2.png", "embedding_cf_simclr_0.png"} <= names
    out = tmp_path / "self.json"
    assert main(["report-diff", "--config", str(SMOKE), "--workspace", str(smoke_ws), "--baseline", "cf",
                 "--output", str(out)]) == 0
    diff = json.loads(out.read_text())
    assert all(r["mean_diff"] == 0 for r in diff["rows"] if r["strategy"] == "cf")


def test_runtime_failure_exit_code(smoke_ws, monkeypatch):
    def boom(self, cell):
        raise RuntimeError("simulated crash")
    monkeypatch.setattr(Runner, "evaluate_cell", boom)
    assert main(["evaluate", "--config", str(SMOKE), "--workspace", str(smoke_ws), "--cells", "standard_simclr_0"]) == 3


def test_failed_cell_does_not_stop_matrix(smoke_ws, tmp_path, monkeypatch):
    import shutil
    ws = tmp_path / "ws"
    shutil.copytree(smoke_ws, ws)
    real = Runner.pretrain_cell

    def flaky(self, cell):
        if cell == "plus_simclr_0":
            raise RuntimeError("simulated crash")
        return real(self, cell)
    monkeypatch.setattr(Runner, "pretrain_cell", flaky)
    assert main(["run-matrix", "--config", str(SMOKE), "--workspace", str(ws)]) == 3
    status = json.loads((ws / "reports" / "matrix_status.json").read_text())
    assert status["plus_simclr_0"].startswith("failed") and status["cf_dino_0"] == "ok"
    assert (ws / "reports" / "plus_simclr_0.error.txt").exists()
