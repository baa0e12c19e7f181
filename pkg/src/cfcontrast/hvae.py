"""Conditional hierarchical VAE used as the image mechanism of the SCM.

Latent hierarchy: the top level is a vector latent, lower levels are
spatial latents at the bottleneck resolution, visited top-down.  The prior
is conditional on the parents at every level and the decoder variance is
fixed, so abduction of the pixel residual is an exact algebraic inversion::

    eps = (x - mu(z, pa)) / sigma
    x_cf = mu(z, pa_cf) + sigma * eps
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scm import CausalGraph, ConfigurationError, ExogenousState
from .trainlog import CsvTrainLog

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite: float | None):
        self.step = step
        self.last_finite = last_finite
        super().__init__(f"non-finite loss at step {step}; last finite loss {last_finite}")


@dataclass
class HvaeConfig:
    image_size: int = 32
    levels: int = 2
    width: int = 16
    top_latent_dim: int = 16
    spatial_latent_channels: int = 4
    embed_dim: int = 32
    # Decoder variance is fixed to 1e-2, i.e. a per-pixel scale of 0.1.
    fixed_output_scale: float = 0.1
    abduction: str = "deterministic"  # or "stochastic"

    @property
    def downsamples(self) -> int:
        # bottleneck at 8x8 for 32px inputs, 2x2 for tiny ones
        return max(1, min(2, int(math.log2(self.image_size)) - 1))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    beta: float = 1.0
    beta_warmup_epochs: int = 5
    weighted_sampling: bool = True
    seed: int = 0
    grad_clip: float = 200.0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs/batch_size/lr must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        return self


def _groups(c: int) -> int:
    return 8 if c % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
            nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, x):
        return x + self.net(x)


class ParentEmbedder(nn.Module):
    """Categorical parents -> one dense conditioning vector."""

    def __init__(self, cardinalities: dict[str, int], dim: int):
        super().__init__()
        self.names = list(cardinalities)
        self.tables = nn.ModuleDict({k: nn.Embedding(n, 8) for k, n in cardinalities.items()})
        self.mlp = nn.Sequential(nn.Linear(8 * len(self.names), dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, parents: dict[str, torch.Tensor]) -> torch.Tensor:
        parts = [self.tables[k](parents[k].long()) for k in self.names]
        return self.mlp(torch.cat(parts, dim=-1))


def _gauss_params(t: torch.Tensor):
    mean, logstd = t.chunk(2, dim=1)
    return mean, logstd.clamp(-6.0, 3.0)


def _kl(qm, qs, pm, ps):
    # KL(N(qm, e^qs) || N(pm, e^ps)), summed over non-batch dims
    kl = ps - qs + (torch.exp(2 * qs) + (qm - pm) ** 2) / (2 * torch.exp(2 * ps)) - 0.5
    return kl.flatten(1).sum(1)


class HVAE(nn.Module):
    def __init__(self, config: HvaeConfig, cardinalities: dict[str, int]):
        super().__init__()
        self.config = config
        self.cardinalities = dict(cardinalities)
        c, e = config.width, config.embed_dim
        s = config.image_size
        nd = config.downsamples
        self.bottleneck = s // 2**nd
        r = self.bottleneck
        zc, zt = config.spatial_latent_channels, config.top_latent_dim

        self.embed = ParentEmbedder(cardinalities, e)

        # full resolution is only touched by the first and last convolutions
        enc = [nn.Conv2d(1, c, 4, stride=2, padding=1), ResBlock(c)]
        for _ in range(nd - 1):
            enc += [nn.Conv2d(c, c, 4, stride=2, padding=1), ResBlock(c)]
        self.encoder = nn.Sequential(*enc)
        flat = c * r * r
        self.q_top = nn.Sequential(nn.Linear(flat + e, 128), nn.SiLU(), nn.Linear(128, 2 * zt))
        self.p_top = nn.Sequential(nn.Linear(e, 64), nn.SiLU(), nn.Linear(64, 2 * zt))
        self.from_top = nn.Sequential(nn.Linear(zt + e, flat), nn.SiLU())

        n_spatial = config.levels - 1
        self.p_spatial = nn.ModuleList(
            [nn.Conv2d(c + e, 2 * zc, 3, padding=1) for _ in range(n_spatial)]
        )
        self.q_spatial = nn.ModuleList(
            [nn.Conv2d(2 * c + e, 2 * zc, 3, padding=1) for _ in range(n_spatial)]
        )
        self.z_proj = nn.ModuleList([nn.Conv2d(zc, c, 1) for _ in range(n_spatial)])
        self.td_blocks = nn.ModuleList([ResBlock(c) for _ in range(n_spatial)])

        dec = [ResBlock(c)]
        for _ in range(nd - 1):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, c, 3, padding=1), ResBlock(c)]
        dec += [nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.out_bias = nn.Linear(e, c // 2)
        self.out = nn.Sequential(nn.SiLU(), nn.Conv2d(c // 2, 1, 3, padding=1))
        # Direct parents -> pixel-logit canvas. Fixed-position acquisition
        # artifacts are explained here before the encoder learns to carry them.
        self.canvas = nn.Linear(e, s * s)

    @property
    def levels(self) -> int:
        return self.config.levels

    @property
    def sigma(self) -> float:
        return self.config.fixed_output_scale

    def _bcast(self, emb, size):
        return emb[:, :, None, None].expand(-1, -1, size, size)

    def _walk(self, x, parents, mode: str, generator=None, latents=None):
        """Top-down pass.

        mode: "sample" draws posterior samples (training), "mean" uses
        posterior means, "given" decodes the supplied latents.
        Returns (mu, latents, kl_per_image).
        """
        emb = self.embed(parents)
        n = emb.shape[0]
        r, c = self.bottleneck, self.config.width
        h = None
        if mode != "given":
            h = self.encoder(x[:, None])
        kl = torch.zeros(n, dtype=emb.dtype, device=emb.device)
        zs = []

        def draw(mean, logstd):
            if mode == "sample":
                noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
                return mean + torch.exp(logstd) * noise
            return mean

        pm, ps = _gauss_params(self.p_top(emb))
        if mode == "given":
            z = latents[0]
        else:
            qm, qs = _gauss_params(self.q_top(torch.cat([h.flatten(1), emb], 1)))
            kl = kl + _kl(qm, qs, pm, ps)
            z = draw(qm, qs)
        zs.append(z)
        d = self.from_top(torch.cat([z, emb], 1)).view(n, c, r, r)
        eb = self._bcast(emb, r)
        for i in range(self.levels - 1):
            pm, ps = _gauss_params(self.p_spatial[i](torch.cat([d, eb], 1)))
            if mode == "given":
                z = latents[i + 1]
            else:
                qm, qs = _gauss_params(self.q_spatial[i](torch.cat([d, h, eb], 1)))
                kl = kl + _kl(qm, qs, pm, ps)
                z = draw(qm, qs)
            zs.append(z)
            d = self.td_blocks[i](d + self.z_proj[i](z))
        feat = self.decoder(d) + self.out_bias(emb)[:, :, None, None]
        s = self.config.image_size
        logits = self.out(feat)[:, 0] + self.canvas(emb).view(n, s, s)
        mu = torch.sigmoid(logits)
        return mu, zs, kl

    def loss(self, x, parents, beta: float = 1.0, generator=None):
        """Negative ELBO per pixel (mean over batch). Returns (loss, nll, kl)."""
        mu, _, kl = self._walk(x, parents, "sample", generator=generator)
        sigma = self.sigma
        npix = x.shape[-1] * x.shape[-2]
        nll = (0.5 * ((x - mu) / sigma) ** 2 + math.log(sigma) + 0.5 * math.log(2 * math.pi)).flatten(1).sum(1)
        loss = (nll + beta * kl) / npix
        return loss.mean(), nll.mean() / npix, kl.mean() / npix

    def decode(self, latents, parents):
        mu, _, _ = self._walk(None, parents, "given", latents=latents)
        return mu


# ---------------------------------------------------------------------------
# numpy-facing mechanism


def _to_parent_tensors(parents, n):
    out = {}
    for k, v in parents.items():
        arr = np.asarray(v)
        if arr.ndim == 0:
            arr = np.full(n, int(arr))
        out[k] = torch.as_tensor(arr, dtype=torch.long)
    return out


class HvaeMechanism:
    """Frozen-or-trainable wrapper exposing abduct/predict on numpy arrays."""

    def __init__(self, model: HVAE, graph: CausalGraph | None = None, meta: dict | None = None):
        self.model = model
        self.graph = graph or CausalGraph.star(list(model.cardinalities))
        self.meta = dict(meta or {})

    @property
    def levels(self) -> int:
        return self.model.levels

    @property
    def image_shape(self) -> tuple[int, int]:
        s = self.model.config.image_size
        return (s, s)

    @property
    def cardinalities(self) -> dict[str, int]:
        return self.model.cardinalities

    def _check(self, images):
        if tuple(images.shape[-2:]) != self.image_shape:
            raise ConfigurationError(
                f"image shape {tuple(images.shape[-2:])} does not match mechanism {self.image_shape}"
            )

    @torch.no_grad()
    def abduct(self, images, parents, batch_size: int = 256, generator=None) -> ExogenousState:
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 2
        if single:
            images = images[None]
        self._check(images)
        self.model.eval()
        mode = "mean" if self.model.config.abduction == "deterministic" else "sample"
        all_z, all_eps = None, []
        pa = _to_parent_tensors(parents, len(images))
        for s in range(0, len(images), batch_size):
            xb = torch.from_numpy(images[s:s + batch_size])
            pb = {k: v[s:s + batch_size] for k, v in pa.items()}
            mu, zs, _ = self.model._walk(xb, pb, mode, generator=generator)
            eps = (xb.double() - mu.double()) / self.model.sigma
            all_eps.append(eps.numpy())
            zs = [z.numpy() for z in zs]
            all_z = zs if all_z is None else [np.concatenate([a, b]) for a, b in zip(all_z, zs)]
        exo = ExogenousState(latents=all_z, residual=np.concatenate(all_eps))
        if single:
            exo = ExogenousState(latents=[z[:1] for z in exo.latents], residual=exo.residual[0])
            exo.single = True
        return exo

    @torch.no_grad()
    def mean(self, exo: ExogenousState, parents, batch_size: int = 256) -> np.ndarray:
        """Decoder mean mu(z, parents) in float64."""
        if exo.levels != self.levels:
            raise ConfigurationError(f"exogenous state has {exo.levels} levels, mechanism has {self.levels}")
        self.model.eval()
        n = exo.latents[0].shape[0]
        pa = _to_parent_tensors(parents, n)
        out = []
        for s in range(0, n, batch_size):
            zs = [torch.from_numpy(z[s:s + batch_size]) for z in exo.latents]
            pb = {k: v[s:s + batch_size] for k, v in pa.items()}
            out.append(self.model.decode(zs, pb).double().numpy())
        return np.concatenate(out)

    def predict(self, exo: ExogenousState, parents, clip: bool = True) -> np.ndarray:
        mu = self.mean(exo, parents)
        residual = exo.residual if exo.residual.ndim == 3 else exo.residual[None]
        x = mu + self.model.sigma * residual
        if clip:
            x = np.clip(x, 0.0, 1.0)
        if getattr(exo, "single", False):
            return x[0]
        return x

    def state_dict(self):
        return self.model.state_dict()

    def clone(self) -> "HvaeMechanism":
        return HvaeMechanism(copy.deepcopy(self.model), self.graph, self.meta)


def build_mechanism(config: HvaeConfig, cardinalities: dict[str, int], seed: int = 0) -> HvaeMechanism:
    torch.manual_seed(seed)
    model = HVAE(config, cardinalities)
    return HvaeMechanism(model)


# ---------------------------------------------------------------------------
# training


def domain_balanced_weights(domains: np.ndarray) -> np.ndarray:
    """Per-sample weights making every observed domain equally likely."""
    domains = np.asarray(domains)
    vals, counts = np.unique(domains, return_counts=True)
    lookup = dict(zip(vals.tolist(), counts.tolist()))
    w = np.array([1.0 / lookup[d] for d in domains.tolist()])
    return w / w.sum()


def batch_indices(n: int, batch_size: int, rng: np.random.Generator, weights=None):
    """One epoch of index batches; weighted draws are with replacement."""
    if weights is None:
        perm = rng.permutation(n)
    else:
        perm = rng.choice(n, size=n, replace=True, p=weights)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    mechanism: HvaeMechanism
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")


def evaluate_elbo(mechanism: HvaeMechanism, images, parents, seed: int = 0, batch_size: int = 256) -> float:
    model = mechanism.model
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, n = 0.0, len(images)
    pa = _to_parent_tensors(parents, n)
    with torch.no_grad():
        for s in range(0, n, batch_size):
            xb = torch.from_numpy(np.asarray(images[s:s + batch_size], dtype=np.float32))
            pb = {k: v[s:s + batch_size] for k, v in pa.items()}
            loss, _, _ = model.loss(xb, pb, beta=1.0, generator=gen)
            total += loss.item() * len(xb)
    return total / n


def train_mechanism(train, val, config: TrainConfig, hvae_config: HvaeConfig | None = None,
                    mechanism: HvaeMechanism | None = None, log_path=None) -> TrainResult:
    """Maximise the ELBO; keep the epoch with the lowest validation loss.

    ``train``/``val`` are :class:`cfcontrast.worlds.Dataset` splits.
    """
    config.validate()
    spec = train.spec
    if mechanism is None:
        hvae_config = hvae_config or HvaeConfig(image_size=spec.image_size)
        mechanism = build_mechanism(hvae_config, spec.parent_cardinalities(), seed=config.seed)
    model = mechanism.model
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    weights = domain_balanced_weights(train.domains) if config.weighted_sampling else None
    images = torch.from_numpy(train.images)
    pa_all = _to_parent_tensors(train.parents(), len(train))
    result = TrainResult(mechanism=mechanism)
    best_state = copy.deepcopy(model.state_dict())
    step, last_finite = 0, None
    writer = CsvTrainLog(log_path)
    for epoch in range(config.epochs):
        model.train()
        warm = config.beta_warmup_epochs
        beta = config.beta * min(1.0, (epoch + 1) / warm) if warm > 0 else config.beta
        for idx in batch_indices(len(train), config.batch_size, rng, weights):
            idx_t = torch.from_numpy(idx)
            xb = images[idx_t]
            pb = {k: v[idx_t] for k, v in pa_all.items()}
            loss, nll, kl = model.loss(xb, pb, beta=beta, generator=gen)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, last_finite)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            last_finite = loss.item()
            step += 1
        val_loss = evaluate_elbo(mechanism, val.images, val.parents(), seed=config.seed)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(step, last_finite)
        row = {"step": step, "epoch": epoch, "loss": last_finite, "lr": config.lr, "val_loss": val_loss}
        result.history.append(row)
        writer.write(row)
        log.debug("hvae epoch %d loss %.4f val %.4f", epoch, last_finite, val_loss)
        if val_loss < result.best_val:
            result.best_val, result.best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    mechanism.meta.update({"train_config": asdict(config), "best_epoch": result.best_epoch,
                           "best_val_loss": result.best_val})
    return result
