"""Synthetic multi-domain image worlds with a known causal graph.

Each image is rendered as ``f(content, domain, attributes)``:

* the content latent (shape class, pose, size, intensity, sensor noise seed)
  is drawn once per ``content_id``;
* binary attributes change how the shape is drawn (``sexlike=1`` fills the
  shape, ``sexlike=0`` draws its outline);
* the domain applies a photometric transform ``offset + gain * base**gamma``
  plus an acquisition artifact (horizontal stripes, a corner watermark).

Content never enters the outer frame or the watermark zone, which is what
makes :func:`domain_oracle` exact on clean renders.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross")
SPLITS = ("train", "val", "test")

# Frame width (pixels) kept free of content; the oracle reads it.
FRAME = 2
# Watermark zone as fractions of the image side: rows [r0, r1), cols [c0, c1).
WATERMARK_ZONE = (1 / 32, 3 / 32, 1 / 32, 11 / 32)


class WorldSpecError(ValueError):
    """Raised for an invalid :class:`WorldSpec`; the message names the field."""


@dataclass(frozen=True)
class DomainStyle:
    offset: float
    gain: float
    gamma: float
    stripes: float = 0.0
    watermark: float = 0.0


# Distinct acquisition styles, cycled when more domains are requested.
# Deliberately subtle: strong styles are trivially separable by any encoder.
DEFAULT_STYLES = (
    DomainStyle(offset=0.10, gain=0.80, gamma=1.0),
    DomainStyle(offset=0.14, gain=0.75, gamma=0.85, stripes=0.02),
    DomainStyle(offset=0.12, gain=0.78, gamma=1.2, watermark=0.25),
    DomainStyle(offset=0.16, gain=0.72, gamma=1.1, stripes=0.015, watermark=0.2),
    DomainStyle(offset=0.08, gain=0.82, gamma=0.9, watermark=0.3),
)
HOLDOUT_STYLE = DomainStyle(offset=0.13, gain=0.76, gamma=1.05, stripes=-0.02)


@dataclass(frozen=True)
class WorldSpec:
    image_size: int = 32
    num_domains: int = 3
    domain_weights: tuple[float, ...] = (0.8, 0.15, 0.05)
    attribute_names: tuple[str, ...] = ("sexlike",)
    # attribute name -> probability vector over its values
    attribute_weights: dict = field(default_factory=lambda: {"sexlike": (0.75, 0.25)})
    content_classes: int = 4
    samples_per_split: dict = field(
        default_factory=lambda: {"train": 1000, "val": 256, "test": 1500}
    )
    master_seed: int = 0
    # "exact": per-split domain counts follow the weights by largest remainder,
    # membership is a random permutation; "iid": each image draws its domain.
    domain_allocation: str = "exact"
    images_per_content: int = 1
    noise_std: float = 0.02
    # Extra test-only images rendered under a domain never used for training.
    holdout_test_samples: int = 0
    # 0 keeps labels independent of domain; >0 tilts class frequencies per domain.
    label_confounding: float = 0.0

    def __post_init__(self):
        # tuples keep WorldSpec comparable by value and JSON stable
        object.__setattr__(self, "domain_weights", tuple(float(w) for w in self.domain_weights))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        object.__setattr__(
            self,
            "attribute_weights",
            {k: tuple(float(p) for p in v) for k, v in dict(self.attribute_weights).items()},
        )
        object.__setattr__(self, "samples_per_split", dict(self.samples_per_split))

    def validate(self) -> "WorldSpec":
        problems = []
        if self.image_size < 16:
            problems.append(f"image_size: must be >= 16, got {self.image_size}")
        if self.num_domains < 1:
            problems.append(f"num_domains: must be >= 1, got {self.num_domains}")
        if len(self.domain_weights) != self.num_domains:
            problems.append(
                f"domain_weights: expected {self.num_domains} entries, got {len(self.domain_weights)}"
            )
        w = np.asarray(self.domain_weights, dtype=float)
        if (w < 0).any():
            problems.append("domain_weights: entries must be >= 0")
        if w.size and abs(w.sum() - 1.0) > 1e-9:
            problems.append(f"domain_weights: must sum to 1, got {w.sum()!r}")
        if self.content_classes < 2 or self.content_classes > len(SHAPES):
            problems.append(
                f"content_classes: must be in [2, {len(SHAPES)}], got {self.content_classes}"
            )
        for name in self.attribute_names:
            if name == "domain":
                problems.append("attribute_names: 'domain' is reserved")
            probs = self.attribute_weights.get(name)
            if probs is None or len(probs) != 2:
                problems.append(f"attribute_weights: '{name}' needs a length-2 probability vector")
            elif abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                problems.append(f"attribute_weights: '{name}' must be a probability vector")
        unknown = set(self.attribute_weights) - set(self.attribute_names)
        if unknown:
            problems.append(f"attribute_weights: unknown attributes {sorted(unknown)}")
        if set(self.samples_per_split) != set(SPLITS):
            problems.append(f"samples_per_split: keys must be {SPLITS}")
        else:
            for split, n in self.samples_per_split.items():
                if n < 0 or n % self.images_per_content:
                    problems.append(
                        f"samples_per_split: '{split}'={n} must be >= 0 and a multiple of "
                        f"images_per_content={self.images_per_content}"
                    )
        if self.images_per_content < 1:
            problems.append("images_per_content: must be >= 1")
        if self.domain_allocation not in ("exact", "iid"):
            problems.append(f"domain_allocation: must be 'exact' or 'iid', got {self.domain_allocation!r}")
        if self.noise_std < 0:
            problems.append("noise_std: must be >= 0")
        if self.holdout_test_samples < 0:
            problems.append("holdout_test_samples: must be >= 0")
        if not 0 <= self.label_confounding < 1:
            problems.append("label_confounding: must be in [0, 1)")
        if problems:
            raise WorldSpecError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain_weights"] = list(self.domain_weights)
        d["attribute_names"] = list(self.attribute_names)
        d["attribute_weights"] = {k: list(v) for k, v in self.attribute_weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise WorldSpecError(f"unknown world fields: {sorted(extra)}")
        return cls(**d)

    def world_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def parent_names(self) -> tuple[str, ...]:
        return ("domain",) + self.attribute_names

    def parent_cardinalities(self) -> dict[str, int]:
        card = {"domain": self.num_domains}
        card.update({a: 2 for a in self.attribute_names})
        return card

    def styles(self) -> list[DomainStyle]:
        return [DEFAULT_STYLES[d % len(DEFAULT_STYLES)] for d in range(self.num_domains)]


@dataclass
class Dataset:
    """In-memory world sample table. Images are float32 in [0, 1] on the 8-bit grid."""

    spec: WorldSpec
    sample_ids: list[str]
    content_ids: list[str]
    domains: np.ndarray
    attributes: dict[str, np.ndarray]
    labels: np.ndarray
    splits: np.ndarray
    images: np.ndarray

    def __len__(self):
        return len(self.sample_ids)

    def parents(self, idx=None) -> dict[str, np.ndarray]:
        sel = slice(None) if idx is None else idx
        pa = {"domain": self.domains[sel]}
        pa.update({k: v[sel] for k, v in self.attributes.items()})
        return pa

    def subset(self, mask_or_idx) -> "Dataset":
        idx = np.arange(len(self))[mask_or_idx]
        return Dataset(
            spec=self.spec,
            sample_ids=[self.sample_ids[i] for i in idx],
            content_ids=[self.content_ids[i] for i in idx],
            domains=self.domains[idx],
            attributes={k: v[idx] for k, v in self.attributes.items()},
            labels=self.labels[idx],
            splits=self.splits[idx],
            images=self.images[idx],
        )

    def split(self, name: str) -> "Dataset":
        return self.subset(self.splits == name)

    def index_of(self, sample_id: str) -> int:
        if not hasattr(self, "_index"):
            self._index = {s: i for i, s in enumerate(self.sample_ids)}
        return self._index[sample_id]

    def sample(self, i: int) -> "Sample":
        return Sample(
            sample_id=self.sample_ids[i],
            content_id=self.content_ids[i],
            image=self.images[i],
            parents={k: int(v[i]) for k, v in self.parents().items()},
            label=int(self.labels[i]),
            split=str(self.splits[i]),
        )


@dataclass
class Sample:
    sample_id: str
    content_id: str
    image: np.ndarray
    parents: dict[str, int]
    label: int
    split: str


# ---------------------------------------------------------------------------
# rendering


def _content_rng(master_seed: int, content_index: int, image_index: int = 0):
    return np.random.default_rng([master_seed, content_index, image_index])


@dataclass(frozen=True)
class ContentLatent:
    label: int
    cx: float
    cy: float
    size: float
    angle: float
    intensity: float
    noise_seed: int


def draw_content(spec: WorldSpec, rng: np.random.Generator, label: int) -> ContentLatent:
    s = spec.image_size
    return ContentLatent(
        label=label,
        cx=s / 2 + rng.uniform(-0.06, 0.06) * s,
        cy=s / 2 + rng.uniform(-0.06, 0.06) * s,
        size=rng.uniform(0.15, 0.22) * s,
        angle=rng.uniform(0, 2 * np.pi),
        intensity=rng.uniform(0.6, 1.0),
        noise_seed=int(rng.integers(2**31)),
    )


def _shape_sdf(shape: str, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return np.hypot(x, y) - r
    if shape == "square":
        h = r / np.sqrt(2) * 1.1
        qx, qy = np.abs(x) - h, np.abs(y) - h
        return np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0)
    if shape == "triangle":
        # equilateral triangle with circumradius r (Inigo Quilez's exact sdf)
        k = np.sqrt(3.0)
        a = r * k / 2
        px = np.abs(x) - a
        py = y + r / 2
        swap = px + k * py > 0
        px2 = np.where(swap, (px - k * py) / 2, px)
        py2 = np.where(swap, (-k * px - py) / 2, py)
        px2 = px2 - np.clip(px2, -2 * a, 0)
        return -np.hypot(px2, py2) * np.sign(py2)
    if shape == "cross":
        w = 0.38 * r

        def box(qx, qy, hx, hy):
            dx, dy = np.abs(qx) - hx, np.abs(qy) - hy
            return np.hypot(np.maximum(dx, 0), np.maximum(dy, 0)) + np.minimum(np.maximum(dx, dy), 0)

        return np.minimum(box(x, y, r, w), box(x, y, w, r))
    raise ValueError(f"unknown shape {shape!r}")


def render_base(spec: WorldSpec, content: ContentLatent, attributes: dict[str, int]) -> np.ndarray:
    """Domain-free image in [0, 1]; background is exactly 0."""
    s = spec.image_size
    coords = np.arange(s) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - content.cx, yy - content.cy
    c, sn = np.cos(content.angle), np.sin(content.angle)
    x, y = c * dx + sn * dy, -sn * dx + c * dy
    sdf = _shape_sdf(SHAPES[content.label], x, y, content.size)
    if attributes.get("sexlike", 0):
        cover = np.clip(0.5 - sdf, 0.0, 1.0)
    else:
        stroke = 0.75 * s / 32
        cover = np.clip(stroke + 0.5 - np.abs(sdf), 0.0, 1.0)
    return content.intensity * cover


def _artifact_maps(size: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(size)
    stripes = np.repeat(np.where(rows % 4 < 2, 1.0, -1.0)[:, None], size, axis=1)
    wm = np.zeros((size, size))
    r0, r1, c0, c1 = (int(round(f * size)) for f in WATERMARK_ZONE)
    # a solid "text bar" burnt into the corner
    wm[r0:r1, c0:c1] = 1.0
    return stripes, wm


def apply_domain(spec: WorldSpec, base: np.ndarray, style: DomainStyle, noise_rng=None) -> np.ndarray:
    stripes, wm = _artifact_maps(spec.image_size)
    img = style.offset + style.gain * np.power(base, style.gamma)
    img = img + style.stripes * stripes
    if style.watermark:
        img = np.where(wm > 0, np.maximum(img, style.offset + style.watermark * wm), img)
    if noise_rng is not None and spec.noise_std > 0:
        img = img + noise_rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used on disk so memory and disk agree."""
    return (np.round(np.clip(img, 0, 1) * 255.0) / 255.0).astype(np.float32)


def style_for(spec: WorldSpec, domain: int) -> DomainStyle:
    if domain == spec.num_domains:
        return HOLDOUT_STYLE
    return spec.styles()[domain]


def render(spec: WorldSpec, content: ContentLatent, parents: dict[str, int]) -> np.ndarray:
    """Pure function of (content latent, parents) -> quantized image."""
    base = render_base(spec, content, parents)
    noise_rng = np.random.default_rng(content.noise_seed)
    return quantize(apply_domain(spec, base, style_for(spec, int(parents["domain"])), noise_rng))


# ---------------------------------------------------------------------------
# dataset generation


def _quota(n: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    raw = n * w
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def _assign(rng, n, weights, mode):
    if mode == "exact":
        counts = _quota(n, weights)
        vals = np.repeat(np.arange(len(weights)), counts)
        return rng.permutation(vals)
    return rng.choice(len(weights), size=n, p=np.asarray(weights))


def _label_probs(spec: WorldSpec, domain: int) -> np.ndarray:
    c = spec.content_classes
    p = np.full(c, 1.0 / c)
    if spec.label_confounding > 0 and domain < spec.num_domains:
        tilt = np.zeros(c)
        tilt[domain % c] = 1.0
        p = (1 - spec.label_confounding) * p + spec.label_confounding * tilt
    return p


def content_latent_for(spec: WorldSpec, content_index: int, image_index: int, label: int) -> ContentLatent:
    base = draw_content(spec, _content_rng(spec.master_seed, content_index), label)
    if image_index == 0:
        return base
    # further images of one content: small pose jitter, fresh sensor noise
    rng = _content_rng(spec.master_seed, content_index, image_index)
    return ContentLatent(
        label=label,
        cx=base.cx + rng.uniform(-0.5, 0.5),
        cy=base.cy + rng.uniform(-0.5, 0.5),
        size=base.size,
        angle=base.angle + rng.uniform(-0.2, 0.2),
        intensity=base.intensity,
        noise_seed=int(rng.integers(2**31)),
    )


def generate_dataset(spec: WorldSpec) -> Dataset:
    """Render the whole world. Deterministic in ``spec.master_seed``."""
    spec.validate()
    rng = np.random.default_rng([spec.master_seed, 7919])
    k = spec.num_domains
    rows = []  # (split, domain, attrs, label, content_index, image_index)
    content_index = 0
    for split in SPLITS:
        n_img = spec.samples_per_split[split]
        n_content = n_img // spec.images_per_content
        content_domains = _assign(rng, n_content, spec.domain_weights, spec.domain_allocation)
        content_attrs = {
            a: _assign(rng, n_content, spec.attribute_weights[a], spec.domain_allocation)
            for a in spec.attribute_names
        }
        for j in range(n_content):
            d = int(content_domains[j])
            label = int(rng.choice(spec.content_classes, p=_label_probs(spec, d)))
            attrs = {a: int(v[j]) for a, v in content_attrs.items()}
            for m in range(spec.images_per_content):
                rows.append((split, d, attrs, label, content_index, m))
            content_index += 1
    for j in range(spec.holdout_test_samples):
        label = int(rng.integers(spec.content_classes))
        attrs = {a: int(rng.choice(2, p=spec.attribute_weights[a])) for a in spec.attribute_names}
        rows.append(("test", k, attrs, label, content_index, 0))
        content_index += 1

    images = np.empty((len(rows), spec.image_size, spec.image_size), dtype=np.float32)
    sample_ids, content_ids = [], []
    for i, (split, d, attrs, label, ci, m) in enumerate(rows):
        latent = content_latent_for(spec, ci, m, label)
        images[i] = render(spec, latent, {"domain": d, **attrs})
        content_ids.append(f"c{ci:06d}")
        sample_ids.append(f"s{ci:06d}_{m}")
    return Dataset(
        spec=spec,
        sample_ids=sample_ids,
        content_ids=content_ids,
        domains=np.array([r[1] for r in rows], dtype=np.int64),
        attributes={a: np.array([r[2][a] for r in rows], dtype=np.int64) for a in spec.attribute_names},
        labels=np.array([r[3] for r in rows], dtype=np.int64),
        splits=np.array([r[0] for r in rows]),
        images=images,
    )


def rerender(dataset: Dataset, i: int, **parent_overrides) -> np.ndarray:
    """Ground-truth counterfactual: same content latent, changed parents."""
    spec = dataset.spec
    ci, m = (int(p) for p in dataset.sample_ids[i][1:].split("_"))
    latent = content_latent_for(spec, ci, m, int(dataset.labels[i]))
    parents = {k: int(v[i]) for k, v in dataset.parents().items()}
    parents.update(parent_overrides)
    return render(spec, latent, parents)


# ---------------------------------------------------------------------------
# oracles


def _frame_mask(size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[:FRAME, :] = mask[-FRAME:, :] = True
    mask[:, :FRAME] = mask[:, -FRAME:] = True
    _, wm = _artifact_maps(size)
    r0, r1, c0, c1 = (int(round(f * size)) for f in WATERMARK_ZONE)
    zone = np.zeros_like(mask)
    zone[r0:r1, c0:c1] = True
    return mask & ~zone


def domain_signature(images: np.ndarray) -> np.ndarray:
    """(offset, stripe amplitude, watermark lift) estimated from content-free pixels."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    size = images.shape[-1]
    stripes, wm = _artifact_maps(size)
    frame = _frame_mask(size)
    pix = images[:, frame]
    pat = stripes[frame]
    # mean over +/- stripe halves cancels the pattern (frame rows are balanced)
    offset = 0.5 * (pix[:, pat > 0].mean(1) + pix[:, pat < 0].mean(1))
    amp = ((pix - offset[:, None]) * pat).mean(1)
    on = wm > 0
    lift = images[:, on].mean(1) - offset
    sig = np.stack([offset, amp, lift], axis=1)
    return sig[0] if single else sig


def _expected_signature(spec: WorldSpec, style: DomainStyle) -> np.ndarray:
    blank = apply_domain(spec, np.zeros((spec.image_size, spec.image_size)), style)
    return domain_signature(blank)


def domain_oracle(images: np.ndarray, spec: WorldSpec, include_holdout: bool = False):
    """Nearest-signature domain for one image (int) or a batch (array)."""
    images = np.asarray(images)
    single = images.ndim == 2
    sig = domain_signature(images[None] if single else images)
    domains = list(range(spec.num_domains)) + ([spec.num_domains] if include_holdout else [])
    ref = np.stack([_expected_signature(spec, style_for(spec, d)) for d in domains])
    dist = ((sig[:, None, :] - ref[None]) ** 2).sum(-1)
    pred = np.asarray(domains)[dist.argmin(1)]
    return int(pred[0]) if single else pred


def attribute_oracle(images: np.ndarray, spec: WorldSpec, domains=None):
    """Filled (1) vs outline (0) shape, judged from the shape's interior brightness."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    if domains is None:
        domains = domain_oracle(images, spec)
    domains = np.broadcast_to(np.asarray(domains), (images.shape[0],))
    size = images.shape[-1]
    stripes, _ = _artifact_maps(size)
    out = np.empty(images.shape[0], dtype=np.int64)
    inner = np.zeros((size, size), dtype=bool)
    inner[3:-3, 3:-3] = True
    for i, (img, d) in enumerate(zip(images, domains)):
        st = style_for(spec, int(d))
        fg = img - st.offset - st.stripes * stripes
        fg = np.where(inner, np.clip(fg, 0, None), 0.0)
        total = fg.sum()
        if total <= 1e-9:
            out[i] = 0
            continue
        yy, xx = np.indices(fg.shape)
        cy, cx = (fg * yy).sum() / total, (fg * xx).sum() / total
        r = max(1, size // 16)
        y0, x0 = int(round(cy)), int(round(cx))
        centre = fg[max(0, y0 - r):y0 + r, max(0, x0 - r):x0 + r].mean()
        peak = np.quantile(fg[inner], 0.98)
        out[i] = int(centre > 0.5 * peak)
    return int(out[0]) if single else out


# ---------------------------------------------------------------------------
# disk format


MANIFEST_NAME = "manifest.csv"


def manifest_columns(spec: WorldSpec) -> list[str]:
    return ["sample_id", "content_id", "domain", *spec.attribute_names, "label", "split"]


def manifest_rows(dataset: Dataset) -> list[list]:
    cols = dataset.spec.attribute_names
    return [
        [
            dataset.sample_ids[i],
            dataset.content_ids[i],
            int(dataset.domains[i]),
            *[int(dataset.attributes[a][i]) for a in cols],
            int(dataset.labels[i]),
            str(dataset.splits[i]),
        ]
        for i in range(len(dataset))
    ]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)


def save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG", optimize=False)


def load_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0).astype(np.float32)


def write_dataset(dataset: Dataset, root: Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(manifest_columns(dataset.spec))
        w.writerows(manifest_rows(dataset))
    for sid, img in zip(dataset.sample_ids, dataset.images):
        save_png(root / "images" / f"{sid}.png", img)
    (root / "world.json").write_text(json.dumps(dataset.spec.to_dict(), indent=2, sort_keys=True))


def read_dataset(root: Path, spec: WorldSpec | None = None) -> Dataset:
    root = Path(root)
    if spec is None:
        spec = WorldSpec.from_dict(json.loads((root / "world.json").read_text()))
    with open(root / MANIFEST_NAME, newline="") as fh:
        rows = list(csv.DictReader(fh))
    images = np.stack([load_png(root / "images" / f"{r['sample_id']}.png") for r in rows])
    return Dataset(
        spec=spec,
        sample_ids=[r["sample_id"] for r in rows],
        content_ids=[r["content_id"] for r in rows],
        domains=np.array([int(r["domain"]) for r in rows], dtype=np.int64),
        attributes={a: np.array([int(r[a]) for r in rows], dtype=np.int64) for a in spec.attribute_names},
        labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
        splits=np.array([r["split"] for r in rows]),
        images=images,
    )
