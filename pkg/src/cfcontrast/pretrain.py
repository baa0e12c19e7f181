"""Contrastive pretraining loop shared by SimCLR and DINO objectives."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .bank import CounterfactualBank
from .hvae import TrainingDiverged, batch_indices
from .losses import DinoHyper, DinoState, dino_loss, ema_update, nt_xent
from .models import EncoderConfig, EncoderModel
from .pairs import AugmentationPipeline, PairFactory
from .trainlog import CsvTrainLog

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 256
    # multi-crop steps are ~5x dearer and the EMA teacher needs many of them
    dino_batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-6
    temperature: float = 0.5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dino: DinoHyper = field(default_factory=DinoHyper)
    crop_scale: tuple[float, float] = (0.5, 1.0)
    local_crop_scale: tuple[float, float] = (0.15, 0.5)
    flip_p: float = 0.5
    jitter: float = 0.2
    # "matched": a plus epoch walks N of the N*K pooled images, so every
    # strategy takes the same number of steps; "pool": a plus epoch is the whole pool
    plus_epoch: str = "matched"
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        d["local_crop_scale"] = list(self.local_crop_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        if "encoder" in d:
            d["encoder"] = EncoderConfig(**d["encoder"])
        if "dino" in d:
            d["dino"] = DinoHyper(**d["dino"])
        for k in ("crop_scale", "local_crop_scale"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def pipelines(self, image_size: int):
        glob = AugmentationPipeline(out_size=image_size, crop_scale=self.crop_scale, flip_p=self.flip_p,
                                    brightness=self.jitter, contrast=self.jitter)
        loc = AugmentationPipeline(out_size=image_size // 2, crop_scale=self.local_crop_scale,
                                   flip_p=self.flip_p, brightness=self.jitter, contrast=self.jitter)
        return glob, loc


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EncoderCheckpoint:
    model: EncoderModel
    metadata: dict
    history: list[dict]

    def embed(self, images) -> np.ndarray:
        return self.model.embed(images)


def _views_simclr(model, a, b, temperature):
    _, za = model(a)
    _, zb = model(b)
    return nt_xent(torch.cat([za, zb]), temperature=temperature)


def _views_dino(state: DinoState, globals_, locals_, update_center=True):
    with torch.no_grad():
        t_out = [state.teacher(g)[1] for g in globals_]
    s_out = [state.student(v)[1] for v in globals_]
    # local crops share a size, so they go through the student in one pass
    loc = state.student(torch.cat(locals_))[1].chunk(len(locals_))
    return dino_loss(state, t_out, s_out + list(loc), update_center=update_center)


class _PoolWalk:
    """Successive shuffles of ``range(n)`` consumed in arbitrary-size slices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf = np.zeros(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while len(self.buf) < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def pretrain(train, val, strategy: str, objective: str, config: PretrainConfig,
             bank: CounterfactualBank | None = None, log_path=None, run_meta: dict | None = None) -> EncoderCheckpoint:
    """Train an encoder; keep the epoch with the lowest validation loss.

    ``bank`` must cover the train and val images for ``plus``/``cf``.
    """
    torch.manual_seed(config.seed)
    bs = config.batch_size if objective == "simclr" else config.dino_batch_size
    size = train.spec.image_size
    glob, loc = config.pipelines(size)
    train_bank = bank.restrict(train.sample_ids) if bank is not None else None
    val_bank = bank.restrict(val.sample_ids) if bank is not None else None
    factory = PairFactory(train, strategy, objective, train_bank, glob, loc, seed=config.seed)
    val_factory = PairFactory(val, strategy, objective, val_bank, glob, loc, seed=config.seed + 1)

    student = EncoderModel(config.encoder, objective)
    if objective == "dino":
        teacher = copy.deepcopy(student)
        state = DinoState(student, teacher, config.encoder.prototypes, config.dino)
        params = student.parameters()
    else:
        state = None
        params = student.parameters()
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    meta = {
        "pair_strategy": strategy,
        "objective": objective,
        "seed": config.seed,
        "config": config.to_dict(),
        "world_hash": train.spec.world_hash(),
    }
    meta["config_hash"] = config_hash({k: meta[k] for k in ("objective", "config", "world_hash")})
    meta.update(run_meta or {})

    def step_loss(batch):
        if objective == "simclr":
            return _views_simclr(student, *batch, config.temperature)
        return _views_dino(state, *batch)

    def val_loss():
        student.eval()
        if state is not None:
            state.teacher.eval()
        vr = np.random.default_rng(config.seed + 17)
        vg = torch.Generator().manual_seed(config.seed + 17)
        total, count = 0.0, 0
        with torch.no_grad():
            for idx in batch_indices(len(val_factory), bs, vr):
                if len(idx) < 2:
                    continue
                batch = val_factory.batch(idx, vr, vg)
                if objective == "simclr":
                    l = _views_simclr(student, *batch, config.temperature)
                else:
                    l = _views_dino(state, *batch, update_center=False)
                total += l.item() * len(idx)
                count += len(idx)
        student.train()
        return total / max(count, 1)

    if config.plus_epoch not in ("matched", "pool"):
        raise ValueError(f"plus_epoch must be 'matched' or 'pool', got {config.plus_epoch!r}")
    rows_per_epoch = len(train) if strategy == "plus" and config.plus_epoch == "matched" else len(factory)
    pool_order = _PoolWalk(len(factory), rng)

    history, best = [], (math.inf, -1)
    best_state = copy.deepcopy(student.state_dict())
    step, last = 0, None
    writer = CsvTrainLog(log_path)
    for epoch in range(config.epochs):
        student.train()
        if state is not None:
            state.teacher.train()
        losses = []
        rows = pool_order.take(rows_per_epoch)
        for idx in (rows[i:i + bs] for i in range(0, len(rows), bs)):
            if len(idx) < 2:
                continue
            batch = factory.batch(idx, rng, gen)
            loss = step_loss(batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, last)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if state is not None:
                ema_update(state.teacher, student, config.dino.momentum)
            last = loss.item()
            losses.append(last)
            step += 1
        vl = val_loss()
        row = {"step": step, "epoch": epoch, "loss": float(np.mean(losses)), "lr": config.lr, "val_loss": vl}
        history.append(row)
        writer.write(row)
        log.debug("%s/%s epoch %d loss %.4f val %.4f", strategy, objective, epoch, row["loss"], vl)
        if vl < best[0]:
            best = (vl, epoch)
            best_state = copy.deepcopy(student.state_dict())
    student.load_state_dict(best_state)
    student.eval()
    meta.update({"best_epoch": best[1], "best_val_loss": best[0]})
    return EncoderCheckpoint(student, meta, history)
