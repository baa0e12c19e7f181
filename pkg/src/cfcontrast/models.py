"""Small encoders, projection/prototype heads and the anti-causal parent classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    family: str = "cnn"  # "cnn" or "vit"
    width: int = 32
    rep_dim: int = 128
    proj_dim: int = 64
    # dino prototype head
    head_hidden: int = 128
    head_bottleneck: int = 64
    prototypes: int = 128
    patch: int = 4


def _conv_bn(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ConvBackbone(nn.Module):
    """Four conv stages, global average pool; accepts any input size >= 8."""

    def __init__(self, width: int = 32, rep_dim: int = 128):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            _conv_bn(1, w, 1),
            _conv_bn(w, 2 * w, 2),
            _conv_bn(2 * w, 2 * w, 2),
            _conv_bn(2 * w, rep_dim, 2),
        )
        self.out_dim = rep_dim

    def forward(self, x):
        if x.dim() == 3:
            x = x[:, None]
        return F.adaptive_avg_pool2d(self.net(x), 1).flatten(1)


class TinyViT(nn.Module):
    """Patch embedding + two transformer blocks; mean-pooled tokens."""

    def __init__(self, rep_dim: int = 128, patch: int = 4, depth: int = 2, heads: int = 4, max_tokens: int = 256):
        super().__init__()
        self.patch = patch
        self.embed = nn.Conv2d(1, rep_dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, max_tokens, rep_dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(rep_dim, heads, 2 * rep_dim, dropout=0.0, batch_first=True,
                                           activation="gelu", norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(rep_dim)
        self.out_dim = rep_dim

    def forward(self, x):
        if x.dim() == 3:
            x = x[:, None]
        t = self.embed(x).flatten(2).transpose(1, 2)
        t = t + self.pos[:, : t.shape[1]]
        return self.norm(self.blocks(t).mean(1))


def make_backbone(cfg: EncoderConfig) -> nn.Module:
    if cfg.family == "cnn":
        return ConvBackbone(cfg.width, cfg.rep_dim)
    if cfg.family == "vit":
        return TinyViT(cfg.rep_dim, cfg.patch)
    raise ValueError(f"unknown encoder family {cfg.family!r}")


class ProjectionHead(nn.Module):
    """Two-layer perceptron used by SimCLR."""

    def __init__(self, in_dim, out_dim, hidden=None):
        super().__init__()
        hidden = hidden or in_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))

    def forward(self, h):
        return self.net(h)


class PrototypeHead(nn.Module):
    def __init__(self, in_dim, hidden, bottleneck, prototypes):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, bottleneck))
        self.last = nn.Linear(bottleneck, prototypes, bias=False)

    def forward(self, h):
        return self.last(F.normalize(self.mlp(h), dim=-1))


class EncoderModel(nn.Module):
    def __init__(self, cfg: EncoderConfig, objective: str = "simclr"):
        super().__init__()
        self.cfg = cfg
        self.objective = objective
        self.backbone = make_backbone(cfg)
        if objective == "simclr":
            self.head = ProjectionHead(self.backbone.out_dim, cfg.proj_dim)
        else:
            self.head = PrototypeHead(self.backbone.out_dim, cfg.head_hidden, cfg.head_bottleneck, cfg.prototypes)

    def forward(self, x):
        h = self.backbone(x)
        return h, self.head(h)

    @torch.no_grad()
    def embed(self, images, batch_size: int = 512) -> np.ndarray:
        was = self.training
        self.eval()
        out = []
        for s in range(0, len(images), batch_size):
            xb = torch.as_tensor(np.asarray(images[s:s + batch_size], dtype=np.float32))
            out.append(self.backbone(xb).numpy())
        self.train(was)
        return np.concatenate(out) if out else np.zeros((0, self.backbone.out_dim), np.float32)


class ParentClassifier(nn.Module):
    """Anti-causal classifier q(pa | x): one softmax head per parent."""

    def __init__(self, cardinalities: dict[str, int], width: int = 16):
        super().__init__()
        self.cardinalities = dict(cardinalities)
        self.body = ConvBackbone(width, 4 * width)
        self.heads = nn.ModuleDict({k: nn.Linear(4 * width, n) for k, n in cardinalities.items()})

    def forward(self, x):
        h = self.body(x)
        return {k: head(h) for k, head in self.heads.items()}

    @torch.no_grad()
    def predict_proba(self, images, batch_size: int = 512) -> dict[str, np.ndarray]:
        self.eval()
        out = {k: [] for k in self.heads}
        for s in range(0, len(images), batch_size):
            xb = torch.as_tensor(np.asarray(images[s:s + batch_size], dtype=np.float32))
            for k, v in self(xb).items():
                out[k].append(F.softmax(v, -1).numpy())
        return {k: np.concatenate(v) for k, v in out.items()}

    def predict(self, images) -> dict[str, np.ndarray]:
        return {k: v.argmax(1) for k, v in self.predict_proba(images).items()}


def train_parent_classifier(train, epochs: int = 15, batch_size: int = 64, lr: float = 2e-3,
                            seed: int = 0, width: int = 16) -> ParentClassifier:
    """Supervised q(pa|x) on real images, domain-balanced batches."""
    from .hvae import batch_indices, domain_balanced_weights

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    clf = ParentClassifier(train.spec.parent_cardinalities(), width)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    images = torch.from_numpy(train.images)
    targets = {k: torch.as_tensor(v) for k, v in train.parents().items()}
    weights = domain_balanced_weights(train.domains)
    for _ in range(epochs):
        clf.train()
        for idx in batch_indices(len(train), batch_size, rng, weights):
            idx = torch.from_numpy(idx)
            out = clf(images[idx])
            loss = sum(F.cross_entropy(out[k], targets[k][idx]) for k in out)
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    return clf
