"""Counterfactual finetuning of a trained mechanism against a frozen parent classifier.

Each step abducts a batch, intervenes on ``variable`` with uniformly drawn
non-observed values and pushes the classifier's prediction on the
counterfactual toward the intervened value.  Parents that were not intervened
on are supervised either with the classifier's own probabilities on the real
image (soft labels, the default) or with the observed values (hard labels).
An optional ELBO term on real images keeps reconstructions anchored.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .hvae import HvaeMechanism, _to_parent_tensors, batch_indices, domain_balanced_weights
from .scm import ConfigurationError


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 64
    lr: float = 1e-4
    variable: str = "domain"
    soft_labels: bool = True
    elbo_weight: float = 1.0
    seed: int = 0


def _check_compatible(mechanism: HvaeMechanism, classifier, variable: str) -> None:
    mc, cc = mechanism.cardinalities, getattr(classifier, "cardinalities", {})
    if variable not in mc:
        raise ConfigurationError(f"mechanism has no parent {variable!r}")
    if variable not in cc or cc[variable] != mc[variable]:
        raise ConfigurationError(
            f"classifier values for {variable!r} ({cc.get(variable)}) do not match the mechanism's ({mc[variable]})"
        )


def counterfactual_finetune(mechanism: HvaeMechanism, classifier, train, config: FinetuneConfig) -> HvaeMechanism:
    """Return a finetuned copy; ``mechanism`` and ``classifier`` are left untouched."""
    _check_compatible(mechanism, classifier, config.variable)
    tuned = mechanism.clone()
    if config.steps <= 0:
        return tuned
    model = tuned.model
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    images = torch.from_numpy(train.images)
    pa_all = _to_parent_tensors(train.parents(), len(train))
    card = mechanism.cardinalities[config.variable]
    weights = domain_balanced_weights(train.domains)
    others = [k for k in classifier.cardinalities if k != config.variable and k in pa_all]

    step = 0
    while step < config.steps:
        for idx in batch_indices(len(train), config.batch_size, rng, weights):
            if step >= config.steps:
                break
            it = torch.from_numpy(idx)
            x = images[it]
            pa = {k: v[it] for k, v in pa_all.items()}
            # uniform over the values that differ from the observed one
            shift = torch.randint(1, card, (len(idx),), generator=gen) if card > 1 else torch.zeros(len(idx), dtype=torch.long)
            target = (pa[config.variable] + shift) % card
            cf_pa = dict(pa)
            cf_pa[config.variable] = target

            model.train()
            mu, zs, _ = model._walk(x, pa, "mean")
            eps = (x - mu) / model.sigma
            x_cf = (model.decode(zs, cf_pa) + model.sigma * eps).clamp(0.0, 1.0)

            out = classifier(x_cf)
            loss = F.cross_entropy(out[config.variable], target)
            if others:
                with torch.no_grad():
                    ref = classifier(x)
                for k in others:
                    if config.soft_labels:
                        loss = loss - (F.softmax(ref[k], -1) * F.log_softmax(out[k], -1)).sum(-1).mean()
                    else:
                        loss = loss + F.cross_entropy(out[k], pa[k])
            if config.elbo_weight > 0:
                elbo, _, _ = model.loss(x, pa, generator=gen)
                loss = loss + config.elbo_weight * elbo
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    model.eval()
    tuned.meta = copy.deepcopy(mechanism.meta)
    tuned.meta["finetune"] = asdict(config)
    return tuned
