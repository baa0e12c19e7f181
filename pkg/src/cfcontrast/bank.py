"""Exhaustive counterfactual banks: every image under every other value of
the intervened variable (domain by default)."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scm import counterfactual
from .worlds import Dataset, load_png, quantize, save_png

log = logging.getLogger(__name__)

BANK_MANIFEST = "bank_manifest.csv"


class MissingCounterfactual(KeyError):
    def __init__(self, sample_id, value):
        self.sample_id, self.value = sample_id, value
        super().__init__(f"no counterfactual for sample {sample_id!r} with target {value}")


@dataclass
class CounterfactualBank:
    variable: str
    cardinality: int
    sample_ids: list[str]
    sources: np.ndarray
    targets: np.ndarray
    images: np.ndarray
    skipped: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {(s, int(t)): i for i, (s, t) in enumerate(zip(self.sample_ids, self.targets))}

    def __len__(self):
        return len(self.sample_ids)

    def entry_id(self, i: int) -> str:
        return bank_entry_id(self.sample_ids[i], self.variable, int(self.targets[i]))

    def lookup(self, sample_id: str, value: int) -> int:
        try:
            return self._index[(sample_id, int(value))]
        except KeyError:
            raise MissingCounterfactual(sample_id, value) from None

    def get(self, sample_id: str, value: int) -> np.ndarray:
        return self.images[self.lookup(sample_id, value)]

    def restrict(self, sample_ids) -> "CounterfactualBank":
        keep = set(sample_ids)
        idx = [i for i, s in enumerate(self.sample_ids) if s in keep]
        return CounterfactualBank(
            self.variable, self.cardinality, [self.sample_ids[i] for i in idx],
            self.sources[idx], self.targets[idx], self.images[idx], self.skipped,
        )

    def value_counts(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.cardinality)


def bank_entry_id(sample_id: str, variable: str, value: int) -> str:
    if variable == "domain":
        return f"{sample_id}__to__{value}"
    return f"{sample_id}__{variable}__to__{value}"


def build_counterfactual_bank(mechanism, dataset: Dataset, variable: str = "domain",
                              batch_size: int = 256) -> CounterfactualBank:
    """K-1 counterfactuals per image, one per non-observed value of ``variable``."""
    card = mechanism.cardinalities[variable]
    pa = dataset.parents()
    observed = pa[variable]
    known = (observed >= 0) & (observed < card)
    skipped = int((~known).sum())
    if skipped:
        log.warning("skipping %d images with %s outside the mechanism's %d values", skipped, variable, card)
    ids, sources, targets, chunks = [], [], [], []
    idx_known = np.flatnonzero(known)
    for start in range(0, len(idx_known), batch_size):
        sel = idx_known[start:start + batch_size]
        sub_pa = {k: v[sel] for k, v in pa.items()}
        exo = mechanism.abduct(dataset.images[sel], sub_pa)
        per_target = {}
        for t in range(card):
            if (sub_pa[variable] != t).any():
                cf_pa = dict(sub_pa)
                cf_pa[variable] = np.full(len(sel), t)
                per_target[t] = mechanism.predict(exo, cf_pa)
        for j, i in enumerate(sel):
            for t in range(card):
                if t == observed[i]:
                    continue
                ids.append(dataset.sample_ids[i])
                sources.append(int(observed[i]))
                targets.append(t)
                chunks.append(per_target[t][j])
    size = dataset.images.shape[-1]
    images = quantize(np.stack(chunks)) if chunks else np.zeros((0, size, size), np.float32)
    return CounterfactualBank(
        variable=variable, cardinality=card, sample_ids=ids,
        sources=np.asarray(sources, dtype=np.int64), targets=np.asarray(targets, dtype=np.int64),
        images=images, skipped=skipped,
    )


def bank_from_oracle(dataset: Dataset, variable: str = "domain") -> CounterfactualBank:
    """Bank of exact counterfactuals re-rendered by the world (a perfect mechanism)."""
    from .worlds import rerender

    card = dataset.spec.parent_cardinalities()[variable]
    observed = dataset.parents()[variable]
    ids, sources, targets, chunks = [], [], [], []
    for i in range(len(dataset)):
        for t in range(card):
            if t != observed[i]:
                ids.append(dataset.sample_ids[i])
                sources.append(int(observed[i]))
                targets.append(t)
                chunks.append(rerender(dataset, i, **{variable: t}))
    size = dataset.spec.image_size
    images = np.stack(chunks).astype(np.float32) if chunks else np.zeros((0, size, size), np.float32)
    return CounterfactualBank(variable, card, ids, np.asarray(sources, dtype=np.int64),
                              np.asarray(targets, dtype=np.int64), images)


def combined_counts(dataset: Dataset, bank: CounterfactualBank) -> np.ndarray:
    real = np.bincount(dataset.parents()[bank.variable], minlength=bank.cardinality)[: bank.cardinality]
    return real + bank.value_counts()


def write_bank(bank: CounterfactualBank, root: Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / BANK_MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entry_id", "sample_id", "variable", "source", "target"])
        for i in range(len(bank)):
            eid = bank.entry_id(i)
            w.writerow([eid, bank.sample_ids[i], bank.variable, int(bank.sources[i]), int(bank.targets[i])])
            save_png(root / f"{eid}.png", bank.images[i])
    (root / "bank_meta.csv").write_text(f"variable,cardinality,skipped\n{bank.variable},{bank.cardinality},{bank.skipped}\n")


def read_bank(root: Path) -> CounterfactualBank:
    root = Path(root)
    with open(root / "bank_meta.csv") as fh:
        meta = next(csv.DictReader(fh))
    with open(root / BANK_MANIFEST, newline="") as fh:
        rows = list(csv.DictReader(fh))
    size = None
    images = [load_png(root / f"{r['entry_id']}.png") for r in rows]
    if images:
        images = np.stack(images)
    else:
        images = np.zeros((0, size or 0, size or 0), np.float32)
    return CounterfactualBank(
        variable=meta["variable"], cardinality=int(meta["cardinality"]),
        sample_ids=[r["sample_id"] for r in rows],
        sources=np.array([int(r["source"]) for r in rows], dtype=np.int64),
        targets=np.array([int(r["target"]) for r in rows], dtype=np.int64),
        images=images, skipped=int(meta["skipped"]),
    )
