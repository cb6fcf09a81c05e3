"""Datasets: on-disk ingestion, toy three-domain benchmark, batch pairing.

The toy benchmark renders geometric shapes (class = shape) under per-domain
photometric conditions (background/foreground palette and pixel noise), so
source and target share geometry but differ photometrically, while the
pre-training domain is a labeled superset of shapes drawn from a much
broader palette.  Shape names double as taxonomy leaves, so class
selection can be exercised without any external hierarchy.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from trida.errors import ValidationError

DOMAIN_ROLES = ("source", "target", "pretrain")

# Catalog order is fixed: task classes are the first n_classes_task entries,
# pre-training classes the first n_classes_pretrain.
SHAPE_CATALOG = ("circle", "square", "triangle", "cross", "ring",
                 "diamond", "xmark", "hbar", "pentagon", "lshape")


def rng_for(seed: int, *tags: str) -> np.random.Generator:
    """Independent, reproducible child generator for a named purpose.

    Every stochastic component draws from its own stream, so enabling or
    disabling one component never perturbs the others' randomness.
    """
    key = tuple(int.from_bytes(hashlib.sha256(t.encode()).digest()[:4], "little")
                for t in tags)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # C x H x W in [0, 1]
    label: int | None
    domain_role: str


@dataclass
class Batch:
    images: np.ndarray           # N x C x H x W
    labels: np.ndarray | None    # N, or None when unlabeled
    indices: np.ndarray          # positions within the owning dataset

    def __len__(self) -> int:
        return self.images.shape[0]


class LabeledDataset:
    """Immutable image dataset for one domain role.

    Images are stored stacked as float64 ``(N, C, H, W)`` in ``[0, 1]``;
    ``labels`` may be None for unlabeled collections.  Target datasets may
    carry ground-truth labels, which the adaptation recipes only read for
    accuracy reporting.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray | None,
                 class_set: list[str], domain_role: str):
        if domain_role not in DOMAIN_ROLES:
            raise ValidationError(f"unknown domain role {domain_role!r}")
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise ValidationError(f"images must be (N, C, H, W), got {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ValidationError("labels must be one per sample")
            if labels.size and (labels.min() < 0 or labels.max() >= len(class_set)):
                raise ValidationError("labels must index class_set")
        elif domain_role in ("source", "pretrain"):
            raise ValidationError(f"{domain_role} datasets must be labeled")
        self.images = images
        self.labels = labels
        self.class_set = list(class_set)
        self.domain_role = domain_role
        self.images.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Sample:
        label = None if self.labels is None else int(self.labels[i])
        return Sample(self.images[i], label, self.domain_role)

    @property
    def n_classes(self) -> int:
        return len(self.class_set)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        labels = None if self.labels is None else self.labels[indices]
        return LabeledDataset(self.images[indices], labels,
                              self.class_set, self.domain_role)

    def batch(self, indices) -> Batch:
        indices = np.asarray(indices)
        labels = None if self.labels is None else self.labels[indices]
        return Batch(self.images[indices], labels, indices)


# ---------------------------------------------------------------------------
# image-folder ingestion
# ---------------------------------------------------------------------------


def load_image_folder(root_path, domain_role: str,
                      image_side: int = 32) -> LabeledDataset:
    """Load a class-per-subdirectory image folder.

    Classes are the sorted subdirectory names; files are read in sorted
    order, resized bilinearly to ``image_side`` and scaled to [0, 1].
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValidationError(f"no class directories under {root}")
    images, labels = [], []
    class_set = [p.name for p in class_dirs]
    for ci, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise ValidationError(f"class directory {cdir.name!r} is empty")
        for f in files:
            with Image.open(f) as im:
                im = im.convert("RGB").resize((image_side, image_side),
                                              Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(ci)
    return LabeledDataset(np.stack(images), np.asarray(labels), class_set,
                          domain_role)


# ---------------------------------------------------------------------------
# toy benchmark
# ---------------------------------------------------------------------------


@dataclass
class PhotometricShift:
    """Per-domain rendering palette: base colors, spread, pixel noise."""

    bg: tuple[float, float, float]
    fg: tuple[float, float, float]
    bg_spread: float = 0.05
    fg_spread: float = 0.05
    noise_std: float = 0.02


def default_domain_shift() -> dict[str, PhotometricShift]:
    return {
        "source": PhotometricShift(bg=(0.92, 0.90, 0.86), fg=(0.70, 0.15, 0.15),
                                   noise_std=0.02),
        "target": PhotometricShift(bg=(0.72, 0.86, 0.93), fg=(0.12, 0.22, 0.60),
                                   noise_std=0.12),
        "pretrain": PhotometricShift(bg=(0.78, 0.80, 0.80), fg=(0.30, 0.28, 0.32),
                                     bg_spread=0.18, fg_spread=0.22,
                                     noise_std=0.04),
    }


@dataclass
class ToyBenchmarkSpec:
    n_classes_task: int = 4
    n_classes_pretrain: int = 8
    image_side: int = 32
    samples_per_class_per_domain: int = 20
    domain_shift: dict[str, PhotometricShift] = field(default_factory=default_domain_shift)
    seed: int = 0

    def __post_init__(self):
        if self.n_classes_pretrain < self.n_classes_task:
            raise ValidationError("n_classes_pretrain must be >= n_classes_task")
        if self.n_classes_pretrain > len(SHAPE_CATALOG):
            raise ValidationError(
                f"at most {len(SHAPE_CATALOG)} classes available")
        if isinstance(self.domain_shift, dict):
            self.domain_shift = {
                k: (v if isinstance(v, PhotometricShift) else PhotometricShift(**v))
                for k, v in self.domain_shift.items()}
        missing = set(DOMAIN_ROLES) - set(self.domain_shift)
        if missing:
            raise ValidationError(f"domain_shift missing roles: {sorted(missing)}")


def _shape_mask(name: str, side: int, cx: float, cy: float, r: float,
                theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    w = max(1.3, 0.22 * r)  # stroke half-width for line shapes
    if name == "circle":
        return u * u + v * v <= r * r
    if name == "ring":
        d2 = u * u + v * v
        return ((0.55 * r) ** 2 <= d2) & (d2 <= r * r)
    if name == "square":
        s = 0.82 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1 * r
    if name == "triangle":
        inside = np.ones((side, side), dtype=bool)
        for ang in (270.0, 30.0, 150.0):
            n = np.deg2rad(ang)
            inside &= (u * np.cos(n) + v * np.sin(n)) <= 0.5 * r
        return inside
    if name == "pentagon":
        inside = np.ones((side, side), dtype=bool)
        for k in range(5):
            n = np.deg2rad(90.0 + 36.0 + 72.0 * k)
            inside &= (u * np.cos(n) + v * np.sin(n)) <= r * np.cos(np.deg2rad(36.0))
        return inside
    if name == "cross":
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | \
               ((np.abs(v) <= w) & (np.abs(u) <= r))
    if name == "xmark":
        diag = (np.abs(u - v) / np.sqrt(2) <= w) | (np.abs(u + v) / np.sqrt(2) <= w)
        return diag & (np.maximum(np.abs(u), np.abs(v)) <= 0.9 * r)
    if name == "hbar":
        return (np.abs(v) <= w) & (np.abs(u) <= r)
    if name == "lshape":
        vert = (np.abs(u + 0.5 * r) <= w) & (np.abs(v) <= r)
        horz = (np.abs(v + 0.5 * r) <= w) & (np.abs(u) <= r)
        return vert | horz
    raise ValidationError(f"unknown shape {name!r}")


def _render_domain(role: str, classes: list[str], spec: ToyBenchmarkSpec,
                   shift: PhotometricShift) -> LabeledDataset:
    rng = rng_for(spec.seed, "toy", role)
    side = spec.image_side
    images, labels = [], []
    for ci, name in enumerate(classes):
        for _ in range(spec.samples_per_class_per_domain):
            cx = side / 2 + rng.uniform(-0.10, 0.10) * side
            cy = side / 2 + rng.uniform(-0.10, 0.10) * side
            r = side * 0.33 * rng.uniform(0.75, 1.05)
            theta = rng.uniform(-0.25, 0.25)
            mask = _shape_mask(name, side, cx, cy, r, theta)
            bg = np.clip(np.asarray(shift.bg) +
                         rng.uniform(-shift.bg_spread, shift.bg_spread, 3), 0, 1)
            fg = np.clip(np.asarray(shift.fg) +
                         rng.uniform(-shift.fg_spread, shift.fg_spread, 3), 0, 1)
            img = np.empty((3, side, side))
            img[:] = bg[:, None, None]
            img += mask[None, :, :] * (fg - bg)[:, None, None]
            img += rng.normal(0.0, shift.noise_std, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(ci)
    return LabeledDataset(np.stack(images), np.asarray(labels), classes, role)


def generate_toy_benchmark(spec: ToyBenchmarkSpec):
    """Render (source, target, pretrain) datasets for the given spec.

    Task classes are the first ``n_classes_task`` shapes of the catalog;
    the pre-training domain covers the first ``n_classes_pretrain`` (a
    strict superset when the counts differ).  Bit-identical for equal
    specs.
    """
    task_classes = list(SHAPE_CATALOG[:spec.n_classes_task])
    pretrain_classes = list(SHAPE_CATALOG[:spec.n_classes_pretrain])
    source = _render_domain("source", task_classes, spec, spec.domain_shift["source"])
    target = _render_domain("target", task_classes, spec, spec.domain_shift["target"])
    pretrain = _render_domain("pretrain", pretrain_classes, spec,
                              spec.domain_shift["pretrain"])
    return source, target, pretrain


# ---------------------------------------------------------------------------
# paired batch streams
# ---------------------------------------------------------------------------


def _cycling_indices(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def paired_batches(a: LabeledDataset, b: LabeledDataset, batch_size: int,
                   seed: int):
    """One epoch of equal-sized batch pairs from two datasets.

    The larger dataset drives the epoch (``ceil(len/batch_size)`` steps,
    each sample visited once); the smaller is reshuffled and cycled so
    every step pairs equally long batches.  Deterministic given the seed.
    """
    if batch_size <= 0:
        raise ValidationError("batch_size must be positive")
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("paired_batches needs non-empty datasets")
    a_drives = len(a) >= len(b)
    big, small = (a, b) if a_drives else (b, a)
    order = rng_for(seed, "pair", "big").permutation(len(big))
    cycle = _cycling_indices(len(small), rng_for(seed, "pair", "small"))
    steps = math.ceil(len(big) / batch_size)
    for s in range(steps):
        big_idx = order[s * batch_size:(s + 1) * batch_size]
        small_idx = np.fromiter(cycle, dtype=np.int64, count=len(big_idx))
        batch_big, batch_small = big.batch(big_idx), small.batch(small_idx)
        yield (batch_big, batch_small) if a_drives else (batch_small, batch_big)


def epoch_steps(a: LabeledDataset, b: LabeledDataset, batch_size: int) -> int:
    return math.ceil(max(len(a), len(b)) / batch_size)


# ---------------------------------------------------------------------------
# benchmark serialization
# ---------------------------------------------------------------------------

_MANIFEST_NAME = "manifest.txt"
_FORMAT = "trida-toy-benchmark-v1"


def save_benchmark_dir(dirpath, source: LabeledDataset, target: LabeledDataset,
                       pretrain: LabeledDataset, spec: ToyBenchmarkSpec) -> None:
    """Write the three domains as raw tensors plus a key-value manifest.

    Layout: ``<role>_images.npy`` / ``<role>_labels.npy`` per role, and
    ``manifest.txt`` with ``key = value`` lines covering the generating
    spec, the seed, and each role's class list.
    """
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    roles = {"source": source, "target": target, "pretrain": pretrain}
    lines = [f"format = {_FORMAT}",
             f"seed = {spec.seed}",
             f"n_classes_task = {spec.n_classes_task}",
             f"n_classes_pretrain = {spec.n_classes_pretrain}",
             f"image_side = {spec.image_side}",
             f"samples_per_class_per_domain = {spec.samples_per_class_per_domain}"]
    for role, shift in spec.domain_shift.items():
        sd = asdict(shift)
        for key in ("bg", "fg"):
            lines.append(f"domain_shift.{role}.{key} = "
                         + " ".join(f"{v:.6f}" for v in sd[key]))
        for key in ("bg_spread", "fg_spread", "noise_std"):
            lines.append(f"domain_shift.{role}.{key} = {sd[key]:.6f}")
    for role, ds in roles.items():
        np.save(d / f"{role}_images.npy", ds.images)
        np.save(d / f"{role}_labels.npy", ds.labels)
        lines.append(f"{role}.classes = " + " ".join(ds.class_set))
        lines.append(f"{role}.n = {len(ds)}")
    (d / _MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_benchmark_dir(dirpath):
    """Inverse of :func:`save_benchmark_dir`; returns (source, target, pretrain)."""
    d = Path(dirpath)
    manifest = d / _MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"missing {manifest}")
    kv = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    if kv.get("format") != _FORMAT:
        raise ValidationError(f"unknown benchmark format {kv.get('format')!r}")
    out = []
    for role in DOMAIN_ROLES:
        images = np.load(d / f"{role}_images.npy")
        labels = np.load(d / f"{role}_labels.npy")
        out.append(LabeledDataset(images, labels, kv[f"{role}.classes"].split(),
                                  role))
    return tuple(out)
