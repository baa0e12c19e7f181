"""Representation and counterfactual evaluation.

Linear and full finetuning probes scored per domain, domain separability of
frozen embeddings, subgroup disparities, embedding export, and the soundness
metrics (effectiveness, composition, reversibility) of a mechanism.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.manifold import TSNE
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold, cross_val_score, train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .bank import CounterfactualBank
from .worlds import Dataset, domain_oracle

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_BUDGETS = (0.05, 0.25, 1.0)


# ---------------------------------------------------------------------------
# ROC-AUC


def roc_auc(labels, scores, num_classes: int | None = None) -> float:
    """Binary ROC-AUC, or one-vs-rest macro average for class-probability matrices.

    Classes without both positives and negatives in ``labels`` are left out
    of the macro average.  Returns NaN when nothing is scorable.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        if len(np.unique(labels)) < 2:
            return float("nan")
        return float(roc_auc_score(labels, scores))
    k = num_classes or scores.shape[1]
    per = []
    for c in range(k):
        pos = labels == c
        if pos.any() and (~pos).any():
            per.append(roc_auc_score(pos, scores[:, c]))
    return float(np.mean(per)) if per else float("nan")


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeResult:
    strategy: str
    objective: str
    label_budget: int
    budget_fraction: float
    per_domain: dict[int, float]
    overall: float
    seed: int
    mode: str = "linear"
    per_subgroup: dict[str, dict[int, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_domain"] = {str(k): v for k, v in self.per_domain.items()}
        d["per_subgroup"] = {a: {str(k): v for k, v in g.items()} for a, g in self.per_subgroup.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeResult":
        d = dict(d)
        d["per_domain"] = {int(k): v for k, v in d["per_domain"].items()}
        d["per_subgroup"] = {a: {int(k): v for k, v in g.items()} for a, g in d.get("per_subgroup", {}).items()}
        return cls(**d)


def budget_indices(labels, fraction: float, seed: int) -> np.ndarray:
    """Label-stratified subset of ``round(fraction * n)`` training rows."""
    labels = np.asarray(labels)
    n = len(labels)
    if not 0 < fraction <= 1:
        raise ValueError(f"label budget fraction must lie in (0, 1], got {fraction}")
    k = max(int(round(fraction * n)), len(np.unique(labels)))
    if k >= n:
        return np.arange(n)
    idx, _ = train_test_split(np.arange(n), train_size=k, stratify=labels, random_state=seed)
    return np.sort(idx)


def _score(probs, test: Dataset, attributes=()) -> tuple[dict, float, dict]:
    c = test.spec.content_classes
    per_domain = {}
    for d in range(test.spec.num_domains + 1):
        m = test.domains == d
        if d == test.spec.num_domains and not m.any():
            continue
        if not m.any():
            log.warning("domain %d absent from the test split; omitted", d)
            continue
        per_domain[d] = roc_auc(test.labels[m], probs[m], c)
    groups = {}
    for a in attributes:
        vals = test.attributes[a]
        groups[a] = {}
        for v in range(2 if a not in test.spec.attribute_weights else len(test.spec.attribute_weights[a])):
            m = vals == v
            if not m.any():
                log.warning("subgroup %s=%d absent from the test split; omitted", a, v)
                continue
            groups[a][v] = roc_auc(test.labels[m], probs[m], c)
    return per_domain, roc_auc(test.labels, probs, c), groups


def _embed(encoder, images) -> np.ndarray:
    if hasattr(encoder, "embed"):
        return np.asarray(encoder.embed(images))
    return np.asarray(encoder(images))


def linear_probe(encoder, train: Dataset, test: Dataset, fraction: float, seed: int = 0,
                 strategy: str = "", objective: str = "", attributes=(), features=None) -> ProbeResult:
    """Class-weighted logistic regression on frozen (standardised) features.

    ``features`` may hold precomputed ``(train, test)`` embeddings.
    """
    idx = budget_indices(train.labels, fraction, seed)
    if features is None:
        ftr, fte = _embed(encoder, train.images), _embed(encoder, test.images)
    else:
        ftr, fte = features
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=3000, class_weight="balanced"))
    clf.fit(ftr[idx], train.labels[idx])
    probs = np.zeros((len(fte), train.spec.content_classes))
    probs[:, clf.classes_] = clf.predict_proba(fte)
    per_domain, overall, groups = _score(probs, test, attributes)
    return ProbeResult(strategy, objective, len(idx), fraction, per_domain, overall, seed, "linear", groups)


def _class_weights(labels, num_classes) -> torch.Tensor:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = np.where(counts > 0, len(labels) / (num_classes * np.maximum(counts, 1)), 0.0)
    return torch.as_tensor(w, dtype=torch.float32)


def finetune_probe(checkpoint, train: Dataset, test: Dataset, fraction: float, seed: int = 0,
                   epochs: int = 20, lr: float = 1e-3, batch_size: int = 64,
                   strategy: str = "", objective: str = "", attributes=()) -> ProbeResult:
    """Backbone and a fresh linear head trained end to end with weighted cross-entropy."""
    model = checkpoint.model if hasattr(checkpoint, "model") else checkpoint
    backbone = copy.deepcopy(model.backbone)
    c = train.spec.content_classes
    torch.manual_seed(seed)
    head = nn.Linear(backbone.out_dim, c)
    # zero start: an untrained head scores every class equally (chance AUC)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    idx = budget_indices(train.labels, fraction, seed)
    x = torch.from_numpy(train.images[idx])
    y = torch.as_tensor(train.labels[idx])
    w = _class_weights(train.labels[idx], c)
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        backbone.train()
        for b in np.array_split(rng.permutation(len(idx)), max(1, int(np.ceil(len(idx) / batch_size)))):
            if len(b) < 2:
                continue
            b = torch.from_numpy(b)
            loss = F.cross_entropy(head(backbone(x[b])), y[b], weight=w)
            opt.zero_grad()
            loss.backward()
            opt.step()
    backbone.eval()
    with torch.no_grad():
        probs = torch.cat([F.softmax(head(backbone(torch.from_numpy(test.images[s:s + 512]))), -1)
                           for s in range(0, len(test), 512)]).numpy()
    per_domain, overall, groups = _score(probs, test, attributes)
    return ProbeResult(strategy, objective, len(idx), fraction, per_domain, overall, seed, "finetune", groups)


# ---------------------------------------------------------------------------
# domain separability


def separability_subsample(domains, max_per_domain: int = 1000, min_per_domain: int = 5,
                           seed: int = 0) -> np.ndarray:
    domains = np.asarray(domains)
    rng = np.random.default_rng(seed)
    keep = []
    for d in np.unique(domains):
        rows = np.flatnonzero(domains == d)
        if len(rows) < min_per_domain:
            log.warning("domain %s has %d samples (< %d); excluded from separability", d, len(rows), min_per_domain)
            continue
        if len(rows) > max_per_domain:
            rows = np.sort(rng.choice(rows, max_per_domain, replace=False))
        keep.append(rows)
    return np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)


def separability_score(embeddings, domains, components: int = 16, folds: int = 5, seed: int = 0,
                       max_per_domain: int = 1000) -> float:
    """Mean stratified k-fold balanced accuracy of PCA + logistic regression predicting the domain."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    domains = np.asarray(domains)
    idx = separability_subsample(domains, max_per_domain, min_per_domain=folds, seed=seed)
    x, d = embeddings[idx], domains[idx]
    if len(np.unique(d)) < 2:
        raise ValueError("domain separability needs at least two domains with enough samples")
    k = max(1, min(components, x.shape[1], len(x) - len(x) // folds - 1))
    pipe = make_pipeline(PCA(k), StandardScaler(), LogisticRegression(max_iter=3000))
    cv = StratifiedKFold(folds, shuffle=True, random_state=seed)
    with warnings.catch_warnings():
        # constant embeddings make PCA's explained-variance ratio 0/0
        warnings.simplefilter("ignore", RuntimeWarning)
        scores = cross_val_score(pipe, x, d, cv=cv, scoring="balanced_accuracy")
    return float(np.mean(scores))


def domain_separability(encoder, test: Dataset, seed: int = 0, **kw) -> float:
    return separability_score(_embed(encoder, test.images), test.domains, seed=seed, **kw)


# ---------------------------------------------------------------------------
# subgroup disparity


def majority_value(dataset: Dataset, attribute: str) -> int:
    return int(np.bincount(dataset.attributes[attribute]).argmax())


def subgroup_report(probe_results, attribute: str, majority: int) -> list[dict]:
    """Rows of per-subgroup ROC-AUC and gap = majority minus minority.

    Results missing either subgroup are skipped with a warning.
    """
    rows = []
    for r in probe_results:
        g = r.per_subgroup.get(attribute, {})
        minority = [v for v in g if v != majority]
        if majority not in g or not minority:
            log.warning("probe %s/%s budget %s lacks a subgroup of %s; omitted",
                        r.strategy, r.objective, r.budget_fraction, attribute)
            continue
        for v in minority:
            rows.append({
                "strategy": r.strategy, "objective": r.objective, "budget_fraction": r.budget_fraction,
                "seed": r.seed, "majority": majority, "minority": v,
                "auc_majority": g[majority], "auc_minority": g[v], "gap": g[majority] - g[v],
            })
    return rows


def mean_abs_gap(rows, strategy: str | None = None, budget_fraction: float | None = None) -> float:
    sel = [r["gap"] for r in rows
           if (strategy is None or r["strategy"] == strategy)
           and (budget_fraction is None or np.isclose(r["budget_fraction"], budget_fraction))]
    return float(np.mean(np.abs(sel))) if sel else float("nan")


# ---------------------------------------------------------------------------
# embeddings


def project_2d(embeddings, seed: int = 0) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n < 5:
        return np.zeros((n, 2))
    perplexity = float(min(30.0, (n - 1) / 3))
    tsne = TSNE(2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(embeddings)


def export_embeddings(encoder, dataset: Dataset, out_dir, seed: int = 0, name: str = "embeddings") -> dict:
    """Write ``<name>.npz`` (ids, domains, labels, embeddings) and ``<name>_2d.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emb = _embed(encoder, dataset.images)
    proj = project_2d(emb, seed)
    np.savez(out / f"{name}.npz", sample_id=np.asarray(dataset.sample_ids), domain=dataset.domains,
             label=dataset.labels, embedding=emb)
    path = out / f"{name}_2d.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "domain", "label", "x", "y"])
        for sid, d, l, (px, py) in zip(dataset.sample_ids, dataset.domains, dataset.labels, proj):
            w.writerow([sid, int(d), int(l), f"{px:.6f}", f"{py:.6f}"])
    return {"embeddings": str(out / f"{name}.npz"), "projection": str(path)}


def read_projection(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "sample_id": np.array([r["sample_id"] for r in rows]),
        "domain": np.array([int(r["domain"]) for r in rows]),
        "xy": np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2),
    }


# ---------------------------------------------------------------------------
# counterfactual soundness


def oracle_predictor(spec, variable: str = "domain"):
    """Noise-free referee built from the world's rendering rules."""
    from .worlds import attribute_oracle

    if variable == "domain":
        return lambda images: domain_oracle(np.asarray(images), spec)
    return lambda images: attribute_oracle(np.asarray(images), spec)


def classifier_predictor(classifier, variable: str = "domain"):
    return lambda images: classifier.predict(np.asarray(images, dtype=np.float32))[variable]


def bank_effectiveness(bank: CounterfactualBank, predictor) -> dict:
    """Fraction of bank images the predictor assigns to their intervened value."""
    if len(bank) == 0:
        raise ValueError("effectiveness needs a non-empty evaluation set")
    pred = np.asarray(predictor(bank.images))
    hit = pred == bank.targets
    per = {int(t): float(hit[bank.targets == t].mean()) for t in np.unique(bank.targets)}
    return {"overall": float(hit.mean()), "per_value": per}


def effectiveness(mechanism, dataset: Dataset, predictor, variable: str = "domain") -> dict:
    """Effectiveness over every (image, non-observed value) intervention."""
    from .bank import build_counterfactual_bank

    if len(dataset) == 0:
        raise ValueError("effectiveness needs a non-empty evaluation set")
    return bank_effectiveness(build_counterfactual_bank(mechanism, dataset, variable), predictor)


def _cf(mechanism, images, pa, cf_pa):
    return mechanism.predict(mechanism.abduct(images, pa), cf_pa)


def composition(mechanism, images, parents, cycles: int) -> float:
    """MAE between x and ``cycles`` successive null-intervention round trips."""
    x = np.asarray(images, dtype=np.float64)
    cur = x.astype(np.float32)
    for _ in range(cycles):
        cur = _cf(mechanism, cur, parents, parents).astype(np.float32)
    return float(np.abs(cur - x).mean())


def reversibility(mechanism, images, parents, variable: str = "domain", targets=None) -> float:
    """MAE after do(v -> v') then do(v' -> v).

    With ``targets`` the round trip goes through those values; otherwise it is
    averaged over every v' != v.
    """
    x = np.asarray(images, dtype=np.float32)
    card = mechanism.cardinalities[variable]
    observed = np.asarray(parents[variable])
    routes = [np.broadcast_to(np.asarray(targets), observed.shape).copy()] if targets is not None else \
        [(observed + shift) % card for shift in range(1, card)]
    errs = []
    for t in routes:
        cf_pa = dict(parents)
        cf_pa[variable] = t
        there = _cf(mechanism, x, parents, cf_pa).astype(np.float32)
        back = _cf(mechanism, there, cf_pa, parents)
        errs.append(np.abs(back - x).mean())
    return float(np.mean(errs)) if errs else 0.0


@dataclass
class SoundnessReport:
    effectiveness: dict[int, float]
    effectiveness_overall: float
    composition: dict[int, float]
    reversibility: float
    referee: str = "oracle"

    def to_dict(self) -> dict:
        return {
            "effectiveness": {str(k): v for k, v in self.effectiveness.items()},
            "effectiveness_overall": self.effectiveness_overall,
            "composition": {str(k): v for k, v in self.composition.items()},
            "reversibility": self.reversibility,
            "referee": self.referee,
        }


def soundness(mechanism, dataset: Dataset, cycles=(1, 2, 5), predictor=None, variable: str = "domain",
              referee: str = "oracle") -> SoundnessReport:
    predictor = predictor or oracle_predictor(dataset.spec, variable)
    pa = dataset.parents()
    eff = effectiveness(mechanism, dataset, predictor, variable)
    comp = {int(m): composition(mechanism, dataset.images, pa, m) for m in cycles}
    rev = reversibility(mechanism, dataset.images, pa, variable)
    return SoundnessReport(eff["per_value"], eff["overall"], comp, rev, referee)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    run_id: str
    strategy: str
    objective: str
    seed: int
    budgets: list[float]
    probes: list[ProbeResult]
    separability: float | None = None
    soundness: dict | None = None
    disparities: list[dict] = field(default_factory=list)
    config_hash: str = ""
    schema_version: int = SCHEMA_VERSION

    def per_domain(self, mode: str = "linear") -> dict[str, dict[str, float]]:
        out = {}
        for p in self.probes:
            if p.mode == mode:
                out[repr(p.budget_fraction)] = {str(k): v for k, v in p.per_domain.items()}
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "strategy": self.strategy,
            "objective": self.objective,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "budgets": list(self.budgets),
            "per_domain": self.per_domain(),
            "probes": [p.to_dict() for p in self.probes],
            "separability": self.separability,
            "soundness": self.soundness,
            "disparities": self.disparities,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"report schema version {version} is not supported (expected {SCHEMA_VERSION})")
        return cls(
            run_id=d["run_id"], strategy=d["strategy"], objective=d["objective"], seed=d["seed"],
            budgets=list(d["budgets"]), probes=[ProbeResult.from_dict(p) for p in d["probes"]],
            separability=d.get("separability"), soundness=d.get("soundness"),
            disparities=d.get("disparities", []), config_hash=d.get("config_hash", ""),
        )

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))
