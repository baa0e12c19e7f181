"""Declarative experiment configuration (YAML)."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .finetune import FinetuneConfig
from .hvae import HvaeConfig, TrainConfig
from .pairs import OBJECTIVES, STRATEGIES
from .pretrain import PretrainConfig
from .scm import CausalGraph, GraphError
from .worlds import WorldSpec, WorldSpecError

TIERS = ("minus", "full", "finetuned")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


def _build(cls, d, where):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class CfModelConfig:
    tier: str = "full"
    variable: str = "domain"
    hvae: HvaeConfig = field(default_factory=HvaeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    classifier_epochs: int = 15

    def effective_train(self) -> TrainConfig:
        # the degraded tier is the same model stopped after one epoch
        return replace(self.train, epochs=1) if self.tier == "minus" else self.train


@dataclass
class PretrainSection:
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    objectives: list[str] = field(default_factory=lambda: list(OBJECTIVES))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    config: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass
class EvalSection:
    budgets: list[float] = field(default_factory=lambda: [0.05, 0.25, 1.0])
    finetune_probe: bool = False
    finetune_epochs: int = 20
    separability: bool = True
    soundness: bool = True
    soundness_cycles: list[int] = field(default_factory=lambda: [1, 2, 5])
    embeddings: bool = True
    subgroup_attribute: str | None = None


@dataclass
class ExperimentConfig:
    workspace: str = "runs/default"
    seed: int = 0
    world: WorldSpec = field(default_factory=WorldSpec)
    graph: CausalGraph | None = None
    cf_model: CfModelConfig = field(default_factory=CfModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.graph is None:
            self.graph = CausalGraph.star(self.world.parent_names)

    # -- validation -------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        try:
            self.world.validate()
        except WorldSpecError as e:
            raise ConfigError(f"world: {e}") from None
        if set(self.graph.image_parents) != set(self.world.parent_names):
            raise ConfigError(
                f"graph: image parents {sorted(self.graph.image_parents)} must match the world's "
                f"{sorted(self.world.parent_names)}"
            )
        cf = self.cf_model
        if cf.tier not in TIERS:
            raise ConfigError(f"cf_model.tier: must be one of {TIERS}, got {cf.tier!r}")
        if cf.variable not in self.world.parent_names:
            raise ConfigError(f"cf_model.variable: {cf.variable!r} is not a parent in the world")
        try:
            cf.train.validate()
        except ValueError as e:
            raise ConfigError(f"cf_model.train: {e}") from None
        if cf.hvae.image_size != self.world.image_size:
            raise ConfigError("cf_model.hvae.image_size: must equal world.image_size")
        for s in self.pretrain.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"pretrain.strategies: unknown strategy {s!r}")
        for o in self.pretrain.objectives:
            if o not in OBJECTIVES:
                raise ConfigError(f"pretrain.objectives: unknown objective {o!r}")
        if not self.pretrain.seeds:
            raise ConfigError("pretrain.seeds: at least one seed is required")
        pc = self.pretrain.config
        if pc.epochs < 1 or pc.batch_size < 2 or pc.dino_batch_size < 2 or pc.lr <= 0 or pc.temperature <= 0:
            raise ConfigError("pretrain.config: epochs >= 1, batch sizes >= 2, lr > 0, temperature > 0")
        for b in self.eval.budgets:
            if not 0 < b <= 1:
                raise ConfigError(f"eval.budgets: fractions must lie in (0, 1], got {b}")
        sub = self.eval.subgroup_attribute
        if sub is not None and sub not in self.world.attribute_names:
            raise ConfigError(f"eval.subgroup_attribute: {sub!r} is not a world attribute")
        return self

    # -- (de)serialisation ------------------------------------------------
    def to_dict(self) -> dict:
        pc = self.pretrain.config.to_dict()
        return {
            "workspace": self.workspace,
            "seed": self.seed,
            "world": self.world.to_dict(),
            "graph": self.graph.to_dict(),
            "cf_model": {
                "tier": self.cf_model.tier,
                "variable": self.cf_model.variable,
                "hvae": asdict(self.cf_model.hvae),
                "train": asdict(self.cf_model.train),
                "finetune": asdict(self.cf_model.finetune),
                "classifier_epochs": self.cf_model.classifier_epochs,
            },
            "pretrain": {
                "strategies": list(self.pretrain.strategies),
                "objectives": list(self.pretrain.objectives),
                "seeds": list(self.pretrain.seeds),
                "config": pc,
            },
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d or {})
        top = {"workspace", "seed", "world", "graph", "cf_model", "pretrain", "eval"}
        extra = set(d) - top
        if extra:
            raise ConfigError(f"unknown top-level keys {sorted(extra)}")
        seed = int(d.get("seed", 0))
        # the global seed fills in any stage seed the file leaves unset
        wd = dict(d.get("world") or {})
        wd.setdefault("master_seed", seed)
        try:
            world = WorldSpec.from_dict(wd)
        except (WorldSpecError, TypeError) as e:
            raise ConfigError(f"world: {e}") from None
        graph = None
        if d.get("graph"):
            try:
                graph = CausalGraph.from_dict(d["graph"])
            except (GraphError, KeyError) as e:
                raise ConfigError(f"graph: {e}") from None
        cf = dict(d.get("cf_model") or {})
        hv = dict(cf.pop("hvae", {}) or {})
        hv.setdefault("image_size", world.image_size)
        cfm = _build(CfModelConfig, {
            **cf,
            "hvae": _build(HvaeConfig, hv, "cf_model.hvae"),
            "train": _build(TrainConfig, {"seed": seed, **(cf.pop("train", {}) or {})}, "cf_model.train"),
            "finetune": _build(FinetuneConfig, cf.pop("finetune", {}), "cf_model.finetune"),
        }, "cf_model")
        pre = dict(d.get("pretrain") or {})
        try:
            pconf = PretrainConfig.from_dict(pre.pop("config", {}) or {})
        except TypeError as e:
            raise ConfigError(f"pretrain.config: {e}") from None
        pre_s = _build(PretrainSection, {**pre, "config": pconf}, "pretrain")
        ev = _build(EvalSection, d.get("eval"), "eval")
        cfg = cls(workspace=str(d.get("workspace", "runs/default")), seed=seed,
                  world=world, graph=graph, cf_model=cfm, pretrain=pre_s, eval=ev)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data or {})

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def section_hash(self, *keys) -> str:
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("workspace")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
