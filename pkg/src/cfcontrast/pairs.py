"""Augmentations and positive-view construction for each pairing strategy.

``standard``: two augmentations of the same real image.
``plus``:     real and counterfactual images pooled as independent samples,
              then paired like ``standard``.
``cf``:       a real image paired with its counterfactual under a target drawn
              uniformly over all values (the real image itself when the
              observed value is drawn).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .bank import CounterfactualBank
from .worlds import Dataset, Sample

STRATEGIES = ("standard", "plus", "cf")
OBJECTIVES = ("simclr", "dino")
N_GLOBAL, N_LOCAL = 2, 8


@dataclass(frozen=True)
class AugmentationPipeline:
    out_size: int = 32
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    blur_p: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 1.0)

    @classmethod
    def identity(cls, out_size: int = 32) -> "AugmentationPipeline":
        return cls(out_size=out_size, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0),
                   flip_p=0.0, brightness=0.0, contrast=0.0, blur_p=0.0)

    @classmethod
    def dino_global(cls, image_size: int = 32) -> "AugmentationPipeline":
        return cls(out_size=image_size, crop_scale=(0.5, 1.0))

    @classmethod
    def dino_local(cls, image_size: int = 32) -> "AugmentationPipeline":
        return cls(out_size=image_size // 2, crop_scale=(0.15, 0.5))

    def __call__(self, images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        """Augment a batch ``(N, H, W)`` in [0, 1] -> ``(N, out, out)`` in [0, 1]."""
        images = images.float()
        n, h, w = images.shape
        x = images[:, None]
        x = self._crop_flip(x, generator)
        if self.brightness > 0:
            f = 1 + (torch.rand(n, 1, 1, 1, generator=generator) * 2 - 1) * self.brightness
            x = x * f
        if self.contrast > 0:
            f = 1 + (torch.rand(n, 1, 1, 1, generator=generator) * 2 - 1) * self.contrast
            m = x.mean(dim=(2, 3), keepdim=True)
            x = (x - m) * f + m
        if self.blur_p > 0:
            x = self._blur(x, generator)
        return x.clamp(0.0, 1.0)[:, 0]

    def _crop_flip(self, x, generator):
        n, _, h, w = x.shape
        lo, hi = self.crop_scale
        rlo, rhi = np.log(self.crop_ratio[0]), np.log(self.crop_ratio[1])
        area = lo + (hi - lo) * torch.rand(n, generator=generator, dtype=torch.float64)
        ratio = torch.exp(rlo + (rhi - rlo) * torch.rand(n, generator=generator, dtype=torch.float64))
        cw = torch.sqrt(area * ratio).clamp(max=1.0)
        ch = torch.sqrt(area / ratio).clamp(max=1.0)
        cx = (torch.rand(n, generator=generator, dtype=torch.float64) * 2 - 1) * (1 - cw)
        cy = (torch.rand(n, generator=generator, dtype=torch.float64) * 2 - 1) * (1 - ch)
        flip = torch.rand(n, generator=generator) < self.flip_p
        sx = torch.where(flip, -cw, cw)
        identity = (lo == hi == 1.0) and self.crop_ratio == (1.0, 1.0) and self.out_size == h
        if identity and not bool(flip.any()):
            return x
        if identity:
            return torch.where(flip[:, None, None, None], x.flip(-1), x)
        theta = torch.zeros(n, 2, 3, dtype=torch.float64)
        theta[:, 0, 0], theta[:, 0, 2] = sx, cx
        theta[:, 1, 1], theta[:, 1, 2] = ch, cy
        grid = F.affine_grid(theta.float(), (n, 1, self.out_size, self.out_size), align_corners=False)
        return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    def _blur(self, x, generator):
        n = x.shape[0]
        apply = torch.rand(n, generator=generator) < self.blur_p
        lo, hi = self.blur_sigma
        sig = lo + (hi - lo) * torch.rand(n, generator=generator)
        k = torch.arange(-2, 3, dtype=torch.float32)
        ker = torch.exp(-(k[None] ** 2) / (2 * sig[:, None] ** 2))
        ker = ker / ker.sum(1, keepdim=True)
        out = x.clone()
        for i in torch.nonzero(apply).flatten().tolist():
            kr = ker[i].view(1, 1, 1, 5)
            y = F.conv2d(F.pad(x[i:i + 1], (2, 2, 0, 0), mode="replicate"), kr)
            y = F.conv2d(F.pad(y, (0, 0, 2, 2), mode="replicate"), kr.transpose(-1, -2))
            out[i] = y[0]
        return out


@dataclass
class ViewBundle:
    views: list[np.ndarray]
    provenance: list[str]
    roles: list[str]
    source_sample_id: str
    target: int | None = None

    def count(self, provenance=None, role=None) -> int:
        return sum(
            1 for p, r in zip(self.provenance, self.roles)
            if (provenance is None or p == provenance or (provenance == "counterfactual" and p.startswith("cf:")))
            and (role is None or r == role)
        )


def _cf_tag(target: int) -> str:
    return f"cf:{target}"


def _gen(seed) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _augment_one(pipeline, image, generator) -> np.ndarray:
    return pipeline(torch.as_tensor(np.asarray(image))[None], generator)[0].numpy()


def standard_pair(sample: Sample, pipeline: AugmentationPipeline, seed: int = 0) -> ViewBundle:
    g = _gen(seed)
    v1 = _augment_one(pipeline, sample.image, g)
    v2 = _augment_one(pipeline, sample.image, g)
    return ViewBundle([v1, v2], ["real", "real"], ["global", "global"], sample.sample_id)


def draw_target(cardinality: int, rng: np.random.Generator) -> int:
    """Uniform over all values, the observed one included."""
    return int(rng.integers(cardinality))


def cf_partner(sample: Sample, bank: CounterfactualBank, target: int) -> tuple[np.ndarray, str]:
    if target == sample.parents[bank.variable]:
        return sample.image, "real"
    return bank.get(sample.sample_id, target), _cf_tag(target)


def cf_pair(sample: Sample, bank: CounterfactualBank, pipeline: AugmentationPipeline, seed: int = 0) -> ViewBundle:
    rng = np.random.default_rng(seed)
    target = draw_target(bank.cardinality, rng)
    partner, tag = cf_partner(sample, bank, target)
    g = _gen(seed)
    v1 = _augment_one(pipeline, sample.image, g)
    v2 = _augment_one(pipeline, partner, g)
    return ViewBundle([v1, v2], ["real", tag], ["global", "global"], sample.sample_id, target)


def dino_bundle(sample: Sample, global_pipe: AugmentationPipeline, local_pipe: AugmentationPipeline,
                seed: int = 0) -> ViewBundle:
    g = _gen(seed)
    x = torch.as_tensor(sample.image)[None]
    views = [global_pipe(x, g)[0].numpy() for _ in range(N_GLOBAL)]
    views += [local_pipe(x, g)[0].numpy() for _ in range(N_LOCAL)]
    return ViewBundle(views, ["real"] * 10, ["global"] * N_GLOBAL + ["local"] * N_LOCAL, sample.sample_id)


def cf_dino_bundle(sample: Sample, bank: CounterfactualBank, global_pipe: AugmentationPipeline,
                   local_pipe: AugmentationPipeline, seed: int = 0) -> ViewBundle:
    """One target per bundle: 1 global + 4 local crops from each of real and partner."""
    rng = np.random.default_rng(seed)
    target = draw_target(bank.cardinality, rng)
    partner, tag = cf_partner(sample, bank, target)
    g = _gen(seed)
    real = torch.as_tensor(sample.image)[None]
    other = torch.as_tensor(np.asarray(partner))[None]
    views = [global_pipe(real, g)[0].numpy(), global_pipe(other, g)[0].numpy()]
    prov = ["real", tag]
    for _ in range(N_LOCAL // 2):
        views.append(local_pipe(real, g)[0].numpy())
        prov.append("real")
    for _ in range(N_LOCAL // 2):
        views.append(local_pipe(other, g)[0].numpy())
        prov.append(tag)
    return ViewBundle(views, prov, ["global"] * N_GLOBAL + ["local"] * N_LOCAL, sample.sample_id, target)


# ---------------------------------------------------------------------------
# pooled stream and batched training views


@dataclass
class ImagePool:
    """Flat image table consumed by training; ``source`` indexes real rows."""

    images: np.ndarray
    source: np.ndarray
    values: np.ndarray  # value of the pairing variable per row
    is_real: np.ndarray

    def __len__(self):
        return len(self.images)


def real_pool(dataset: Dataset, variable: str = "domain") -> ImagePool:
    n = len(dataset)
    return ImagePool(dataset.images, np.arange(n), dataset.parents()[variable].copy(), np.ones(n, bool))


def plus_stream(dataset: Dataset, bank: CounterfactualBank, seed: int = 0) -> ImagePool:
    """Real images and all bank images as one shuffled pool of independent samples."""
    n = len(dataset)
    src = np.array([dataset.index_of(s) for s in bank.sample_ids], dtype=np.int64)
    images = np.concatenate([dataset.images, bank.images]) if len(bank) else dataset.images
    pool = ImagePool(
        images=images,
        source=np.concatenate([np.arange(n), src]),
        values=np.concatenate([dataset.parents()[bank.variable], bank.targets]),
        is_real=np.concatenate([np.ones(n, bool), np.zeros(len(bank), bool)]),
    )
    perm = np.random.default_rng(seed).permutation(len(pool))
    return ImagePool(pool.images[perm], pool.source[perm], pool.values[perm], pool.is_real[perm])


def training_multiset(dataset: Dataset, bank: CounterfactualBank | None, strategy: str) -> list[bytes]:
    """Sorted image fingerprints a strategy trains on (for multiset comparisons)."""
    if strategy == "standard" or bank is None:
        imgs = dataset.images
    elif strategy == "plus":
        imgs = plus_stream(dataset, bank).images
    else:
        imgs = np.concatenate([dataset.images, bank.images])
    return sorted(np.ascontiguousarray(im).tobytes() for im in imgs)


@dataclass
class PairFactory:
    """Builds batched views for ``strategy`` x ``objective`` during training."""

    dataset: Dataset
    strategy: str = "standard"
    objective: str = "simclr"
    bank: CounterfactualBank | None = None
    pipeline: AugmentationPipeline = field(default_factory=AugmentationPipeline)
    local_pipeline: AugmentationPipeline | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"pair_strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.strategy in ("plus", "cf") and self.bank is None:
            raise ValueError(f"strategy {self.strategy!r} needs a counterfactual bank")
        if self.local_pipeline is None:
            size = self.pipeline.out_size
            self.local_pipeline = replace(self.pipeline, out_size=size // 2, crop_scale=(0.15, 0.5))
        if self.strategy == "plus":
            self.pool = plus_stream(self.dataset, self.bank, seed=self.seed)
        else:
            var = self.bank.variable if self.bank is not None else "domain"
            self.pool = real_pool(self.dataset, var)
        if self.strategy == "cf":
            # (real row, target) -> bank row, vectorised
            card = self.bank.cardinality
            self._lut = np.full((len(self.dataset), card), -1, dtype=np.int64)
            for j, (sid, t) in enumerate(zip(self.bank.sample_ids, self.bank.targets)):
                self._lut[self.dataset.index_of(sid), t] = j

    def __len__(self):
        return len(self.pool)

    def partners(self, idx: np.ndarray, rng: np.random.Generator):
        """Partner images and targets for real rows ``idx`` (cf strategy)."""
        card = self.bank.cardinality
        targets = rng.integers(card, size=len(idx))
        observed = self.pool.values[idx]
        same = targets == observed
        rows = self._lut[idx, targets]
        missing = (~same) & (rows < 0)
        if missing.any():
            i = int(idx[np.flatnonzero(missing)[0]])
            from .bank import MissingCounterfactual
            raise MissingCounterfactual(self.dataset.sample_ids[i], int(targets[np.flatnonzero(missing)[0]]))
        partner = np.where(same[:, None, None], self.pool.images[idx], self.bank.images[np.maximum(rows, 0)])
        return partner, targets, same

    def batch(self, idx: np.ndarray, rng: np.random.Generator, generator: torch.Generator):
        """Views for a batch of pool rows.

        simclr -> (view_a, view_b), each (B, S, S)
        dino   -> (globals list of 2, locals list of 8)
        """
        first = self.pool.images[idx]
        if self.strategy == "cf":
            second, _, _ = self.partners(idx, rng)
        else:
            second = first
        a = torch.from_numpy(np.ascontiguousarray(first))
        b = torch.from_numpy(np.ascontiguousarray(second))
        if self.objective == "simclr":
            return self.pipeline(a, generator), self.pipeline(b, generator)
        globals_ = [self.pipeline(a, generator), self.pipeline(b, generator)]
        locals_ = [self.local_pipeline(a, generator) for _ in range(N_LOCAL // 2)]
        locals_ += [self.local_pipeline(b, generator) for _ in range(N_LOCAL // 2)]
        return globals_, locals_
