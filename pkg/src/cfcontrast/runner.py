"""Workspace orchestration: resumable, hash-checked stages and the strategy matrix.

Layout under the workspace root::

    world/                 images/, manifest.csv, world.json
    cf/                    mechanism.ckpt, classifier.ckpt, train_log.csv, cf.json
    bank/                  <id>.png, bank_manifest.csv, bank_meta.csv, bank.json
    pretrain/<cell>/       encoder.ckpt, train_log.csv, cell.json
    eval/<cell>/           embeddings.npz, embeddings_2d.csv
    reports/               <cell>.json, diff_vs_standard.json, matrix_status.json
    figures/
"""
from __future__ import annotations

import fnmatch
import json
import logging
import shutil
import traceback
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from .bank import build_counterfactual_bank, read_bank, write_bank
from .checkpoint import (file_hash, load_classifier, load_encoder, load_mechanism, save_classifier,
                         save_encoder, save_mechanism)
from .config import ExperimentConfig
from .evaluation import (DEFAULT_BUDGETS, MetricsReport, classifier_predictor, domain_separability,
                         export_embeddings, finetune_probe, linear_probe, majority_value, soundness,
                         subgroup_report)
from .finetune import counterfactual_finetune
from .hvae import train_mechanism
from .models import train_parent_classifier
from .pretrain import pretrain
from .worlds import WorldSpec, generate_dataset, read_dataset, write_dataset

log = logging.getLogger(__name__)


class StageConflict(RuntimeError):
    """Existing output was produced by a different configuration."""


class MissingInput(RuntimeError):
    """A stage's prerequisite has not been produced yet."""


def cell_name(strategy: str, objective: str, seed: int) -> str:
    return f"{strategy}_{objective}_{seed}"


def parse_cell(name: str) -> tuple[str, str, int]:
    strategy, objective, seed = name.rsplit("_", 2)
    return strategy, objective, int(seed)


def select_cells(config: ExperimentConfig, pattern: str | None = None) -> list[str]:
    cells = [cell_name(s, o, seed) for o in config.pretrain.objectives
             for s in config.pretrain.strategies for seed in config.pretrain.seeds]
    if not pattern:
        return cells
    pats = [p.strip() for p in pattern.split(",") if p.strip()]
    return [c for c in cells if any(fnmatch.fnmatchcase(c, p) for p in pats)]


def _read_json(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    world = property(lambda self: self.root / "world")
    cf = property(lambda self: self.root / "cf")
    bank = property(lambda self: self.root / "bank")
    reports = property(lambda self: self.root / "reports")
    figures = property(lambda self: self.root / "figures")

    def pretrain(self, cell: str) -> Path:
        return self.root / "pretrain" / cell

    def eval(self, cell: str) -> Path:
        return self.root / "eval" / cell


class Runner:
    def __init__(self, config: ExperimentConfig, workspace=None, force: bool = False):
        self.config = config
        self.ws = Workspace(workspace or config.workspace)
        self.force = force
        self._dataset = None
        torch.use_deterministic_algorithms(True, warn_only=True)

    # -- hashes -----------------------------------------------------------
    def world_hash(self) -> str:
        return self.config.world.world_hash()

    def cf_hash(self) -> str:
        return self.config.section_hash("world", "graph", "cf_model")

    def cell_hash(self, strategy: str) -> str:
        keys = ("world", "pretrain") if strategy == "standard" else ("world", "graph", "cf_model", "pretrain")
        return self.config.section_hash(*keys)

    def report_hash(self, strategy: str) -> str:
        keys = ("world", "pretrain", "eval") if strategy == "standard" else \
            ("world", "graph", "cf_model", "pretrain", "eval")
        return self.config.section_hash(*keys)

    def report_is_current(self, cell: str) -> bool:
        rep = _read_json(self.ws.reports / f"{cell}.json")
        return rep is not None and rep.get("config_hash") == self.report_hash(parse_cell(cell)[0])

    def _guard(self, meta_path: Path, key: str, expected: str, what: str) -> bool:
        """True when up to date; raises on mismatch unless forced."""
        meta = _read_json(meta_path)
        if meta is None:
            return False
        if meta.get(key) == expected:
            return True
        if self.force:
            log.info("%s: hash changed, rebuilding (--force)", what)
            return False
        raise StageConflict(f"{what} at {meta_path.parent} was built from {key}={meta.get(key)}, "
                            f"config gives {expected}; rerun with --force to overwrite")

    # -- world ------------------------------------------------------------
    def generate_world(self) -> bool:
        """Returns True if the dataset was (re)written."""
        meta = self.ws.world / "world.json"
        if meta.exists():
            existing = WorldSpec.from_dict(_read_json(meta)).world_hash()
            if existing == self.world_hash():
                return False
            if not self.force:
                raise StageConflict(f"world at {self.ws.world} has hash {existing}, "
                                    f"config gives {self.world_hash()}; rerun with --force to overwrite")
            shutil.rmtree(self.ws.world)
        ds = generate_dataset(self.config.world.validate())
        write_dataset(ds, self.ws.world)
        self._dataset = ds
        return True

    def dataset(self):
        if self._dataset is None:
            if not (self.ws.world / "world.json").exists():
                raise MissingInput(f"no world in {self.ws.world}; run generate-world first")
            ds = read_dataset(self.ws.world)
            if ds.spec.world_hash() != self.world_hash():
                raise StageConflict(f"world on disk ({ds.spec.world_hash()}) does not match the config "
                                    f"({self.world_hash()}); regenerate with --force")
            self._dataset = ds
        return self._dataset

    # -- counterfactual model ---------------------------------------------
    def train_cf(self) -> dict:
        meta_path = self.ws.cf / "cf.json"
        if self._guard(meta_path, "config_hash", self.cf_hash(), "counterfactual model"):
            return _read_json(meta_path)
        ds = self.dataset()
        cfm = self.config.cf_model
        train, val = ds.split("train"), ds.split("val")
        res = train_mechanism(train, val, cfm.effective_train(), cfm.hvae, log_path=self.ws.cf / "train_log.csv")
        mech = res.mechanism
        mech.graph = self.config.graph
        clf = train_parent_classifier(train, epochs=cfm.classifier_epochs, seed=cfm.train.seed)
        if cfm.tier == "finetuned":
            mech = counterfactual_finetune(mech, clf, train, replace(cfm.finetune, variable=cfm.variable))
        meta = {"config_hash": self.cf_hash(), "world_hash": self.world_hash(), "tier": cfm.tier,
                "variable": cfm.variable, "best_epoch": res.best_epoch, "best_val_loss": res.best_val}
        if self.config.eval.soundness:
            sub = val.subset(np.arange(min(len(val), 256)))
            meta["soundness"] = soundness(mech, sub, self.config.eval.soundness_cycles,
                                          variable=cfm.variable).to_dict()
            meta["soundness_classifier"] = soundness(
                mech, sub, (1,), predictor=classifier_predictor(clf, cfm.variable), variable=cfm.variable,
                referee="classifier").to_dict()
        meta["mechanism_sha256"] = save_mechanism(self.ws.cf / "mechanism.ckpt", mech, ds.spec, self.cf_hash())
        save_classifier(self.ws.cf / "classifier.ckpt", clf, ds.spec)
        _write_json(meta_path, meta)
        return meta

    def mechanism(self):
        path = self.ws.cf / "mechanism.ckpt"
        if not path.exists():
            raise MissingInput(f"no counterfactual model in {self.ws.cf}; run train-cf first")
        return load_mechanism(path, self.config.world)

    def classifier(self):
        return load_classifier(self.ws.cf / "classifier.ckpt")

    # -- bank -------------------------------------------------------------
    def build_bank(self) -> dict:
        meta_path = self.ws.bank / "bank.json"
        if self._guard(meta_path, "config_hash", self.cf_hash(), "counterfactual bank"):
            return _read_json(meta_path)
        ds = self.dataset()
        cf_meta = _read_json(self.ws.cf / "cf.json")
        if cf_meta is None or cf_meta.get("config_hash") != self.cf_hash():
            raise MissingInput("counterfactual model missing or stale; run train-cf first")
        pool = ds.subset(ds.splits != "test")
        bank = build_counterfactual_bank(self.mechanism(), pool, self.config.cf_model.variable)
        for old in self.ws.bank.glob("*.png"):
            old.unlink()
        write_bank(bank, self.ws.bank)
        meta = {"config_hash": self.cf_hash(), "size": len(bank), "skipped": bank.skipped,
                "value_counts": bank.value_counts().tolist(),
                "manifest_sha256": file_hash(self.ws.bank / "bank_manifest.csv")}
        _write_json(meta_path, meta)
        return meta

    def bank(self):
        meta = _read_json(self.ws.bank / "bank.json")
        if meta is None:
            raise MissingInput(f"no bank in {self.ws.bank}; run build-bank first")
        if meta.get("config_hash") != self.cf_hash():
            raise StageConflict("bank was built from a different counterfactual configuration; rebuild it")
        return read_bank(self.ws.bank)

    # -- pretraining ------------------------------------------------------
    def pretrain_cell(self, cell: str) -> dict:
        strategy, objective, seed = parse_cell(cell)
        d = self.ws.pretrain(cell)
        d.mkdir(parents=True, exist_ok=True)
        meta_path = d / "cell.json"
        expected = self.cell_hash(strategy)
        with FileLock(str(d / ".lock")):
            meta = _read_json(meta_path)
            ck = d / "encoder.ckpt"
            if (meta and meta.get("config_hash") == expected and ck.exists()
                    and file_hash(ck) == meta.get("encoder_sha256")):
                return {**meta, "reused": True}
            if meta and meta.get("config_hash") != expected and not self.force:
                raise StageConflict(f"cell {cell} was trained from config {meta.get('config_hash')}; "
                                    f"rerun with --force")
            ds = self.dataset()
            bank = self.bank() if strategy != "standard" else None
            pc = self.config.pretrain.config
            pc = type(pc).from_dict({**pc.to_dict(), "seed": int(seed)})
            out = pretrain(ds.split("train"), ds.split("val"), strategy, objective, pc, bank=bank,
                           log_path=d / "train_log.csv", run_meta={"cell": cell, "run_config_hash": expected})
            sha = save_encoder(ck, out, ds.spec)
            meta = {"cell": cell, "config_hash": expected, "encoder_sha256": sha,
                    "best_epoch": out.metadata["best_epoch"], "pair_strategy": strategy,
                    "objective": objective, "seed": int(seed)}
            _write_json(meta_path, meta)
            return meta

    # -- evaluation -------------------------------------------------------
    def evaluate_cell(self, cell: str) -> MetricsReport:
        strategy, objective, seed = parse_cell(cell)
        ck_path = self.ws.pretrain(cell) / "encoder.ckpt"
        if not ck_path.exists():
            raise MissingInput(f"no encoder for cell {cell}; run pretrain first")
        ck = load_encoder(ck_path)
        ds = self.dataset()
        train, test = ds.split("train"), ds.split("test")
        ev = self.config.eval
        attrs = (ev.subgroup_attribute,) if ev.subgroup_attribute else ()
        feats = (ck.embed(train.images), ck.embed(test.images))
        budgets = list(ev.budgets or DEFAULT_BUDGETS)
        probes = [linear_probe(None, train, test, b, seed, strategy, objective, attrs, features=feats)
                  for b in budgets]
        if ev.finetune_probe:
            probes += [finetune_probe(ck, train, test, b, seed, epochs=ev.finetune_epochs, strategy=strategy,
                                      objective=objective, attributes=attrs) for b in budgets]
        report = MetricsReport(run_id=cell, strategy=strategy, objective=objective, seed=seed,
                               budgets=budgets, probes=probes,
                               config_hash=self.report_hash(strategy))
        if ev.separability:
            in_domain = test.subset(test.domains < ds.spec.num_domains)
            report.separability = domain_separability(ck, in_domain, seed=0)
        cf_meta = _read_json(self.ws.cf / "cf.json")
        if ev.soundness and cf_meta and strategy != "standard":
            report.soundness = cf_meta.get("soundness")
        if ev.subgroup_attribute:
            report.disparities = subgroup_report(probes, ev.subgroup_attribute,
                                                 majority_value(train, ev.subgroup_attribute))
        if ev.embeddings:
            export_embeddings(ck, test, self.ws.eval(cell), seed=0)
        self.ws.reports.mkdir(parents=True, exist_ok=True)
        report.save(self.ws.reports / f"{cell}.json")
        return report

    # -- matrix -----------------------------------------------------------
    def run_matrix(self, pattern: str | None = None) -> dict:
        cells = select_cells(self.config, pattern)
        self.generate_world()
        if any(parse_cell(c)[0] != "standard" for c in cells):
            self.train_cf()
            self.build_bank()
        status = {}
        for cell in cells:
            try:
                meta = self.pretrain_cell(cell)
                if not (meta.get("reused") and self.report_is_current(cell)):
                    self.evaluate_cell(cell)
                status[cell] = "ok"
            except Exception as e:  # a failed cell must not stop the matrix
                log.error("cell %s failed: %s", cell, e)
                status[cell] = f"failed: {type(e).__name__}: {e}"
                (self.ws.reports).mkdir(parents=True, exist_ok=True)
                (self.ws.reports / f"{cell}.error.txt").write_text(traceback.format_exc())
        _write_json(self.ws.reports / "matrix_status.json", status)
        reports = [self.ws.reports / f"{c}.json" for c in cells if status[c] == "ok"]
        if reports:
            from .reporting import difference_report

            _write_json(self.ws.reports / "diff_vs_standard.json", difference_report(reports))
        return status
