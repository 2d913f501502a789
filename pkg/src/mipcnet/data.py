"""Synthetic desk-scale datasets, folder-based loading, preprocessing and
augmentation.

Interchange format: one directory holding `<id>_img.png` (16-bit grayscale)
and `<id>_mask.png` (8-bit integer labels) pairs plus a `manifest.json`
with ids, class names, class count and pixel spacing. Generated intensities
are quantised to the 16-bit grid at creation time so a write/reload round
trip is exact.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 16
_QUANT = 65535


@dataclass
class Sample:
    image: np.ndarray                       # (C, H, W) float32
    label: np.ndarray                       # (H, W) int64, values < num_classes
    id: str
    spacing: tuple[float, float] | None = None

    def validate(self, num_classes: int | None = None) -> "Sample":
        if self.image.ndim != 3:
            raise ValueError(f"sample {self.id}: image must be (C, H, W)")
        if self.label.ndim != 2:
            raise ValueError(f"sample {self.id}: label must be (H, W)")
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(
                f"sample {self.id}: image {self.image.shape[1:]} and "
                f"label {self.label.shape} spatial dims differ"
            )
        if not np.isfinite(self.image).all():
            raise ValueError(f"sample {self.id}: image has non-finite values")
        if self.label.min() < 0:
            raise ValueError(f"sample {self.id}: negative label value")
        if num_classes is not None and self.label.max() >= num_classes:
            raise ValueError(
                f"sample {self.id}: label value {self.label.max()} >= num_classes {num_classes}"
            )
        return self


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int = 32
    num_classes: int = 4
    image_size: int = 64
    shapes_per_class: tuple[int, int] = (1, 2)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.image_size < MIN_IMAGE_SIZE:
            raise ValueError(
                f"image_size {self.image_size} too small to place shapes "
                f"(minimum {MIN_IMAGE_SIZE})"
            )
        lo, hi = self.shapes_per_class
        if not (1 <= lo <= hi):
            raise ValueError("shapes_per_class must satisfy 1 <= lo <= hi")


def _quantize(img: np.ndarray) -> np.ndarray:
    levels = np.round(np.clip(img, 0.0, 1.0) * _QUANT)
    return (levels / _QUANT).astype(np.float32)


def _render_sample(spec: SyntheticSpec, rng: np.random.Generator, idx: int) -> Sample:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _attempt in range(50):
        label = np.zeros((size, size), dtype=np.int64)
        for k in range(1, spec.num_classes):
            lo, hi = spec.shapes_per_class
            n_shapes = int(rng.integers(lo, hi + 1))
            for _ in range(n_shapes):
                ry = rng.uniform(size / 10, size / 4)
                rx = rng.uniform(size / 10, size / 4)
                cy = rng.uniform(ry, size - ry)
                cx = rng.uniform(rx, size - rx)
                inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
                label[inside] = k                       # later classes overwrite
        present = set(np.unique(label))
        if all(k in present for k in range(1, spec.num_classes)):
            break
    else:
        raise RuntimeError(f"could not place all classes in sample {idx}")
    intensity = label.astype(np.float64) / (spec.num_classes - 1)
    if spec.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, intensity.shape)
    image = _quantize(intensity)[None, :, :]
    return Sample(image=image, label=label, id=f"sample{idx:04d}", spacing=(1.0, 1.0))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic dataset of per-class ellipse blobs on a noisy background.

    Later classes overwrite earlier ones at overlaps; a sample is redrawn
    until every foreground class keeps at least one pixel, so the manifest
    class list is exact.
    """
    rng = np.random.default_rng(spec.seed)
    samples = [_render_sample(spec, rng, i) for i in range(spec.num_samples)]
    names = ["background"] + [f"class{k}" for k in range(1, spec.num_classes)]
    return Dataset(samples=samples, num_classes=spec.num_classes, class_names=names)


def save_folder(dataset: Dataset, path: str | Path) -> Path:
    """Write `<id>_img.png` / `<id>_mask.png` pairs plus manifest.json."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    spacing = None
    for s in dataset:
        s.validate(dataset.num_classes)
        if s.image.shape[0] != 1:
            raise ValueError(f"sample {s.id}: PNG export supports single-channel images")
        levels = np.round(np.clip(s.image[0], 0.0, 1.0) * _QUANT).astype(np.uint16)
        Image.fromarray(levels, mode="I;16").save(root / f"{s.id}_img.png")
        if s.label.max() > 255:
            raise ValueError(f"sample {s.id}: label values exceed 8-bit mask range")
        Image.fromarray(s.label.astype(np.uint8), mode="L").save(root / f"{s.id}_mask.png")
        spacing = s.spacing
    manifest = {
        "ids": [s.id for s in dataset],
        "num_classes": dataset.num_classes,
        "class_names": dataset.class_names,
        "spacing": list(spacing) if spacing else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def _read_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype == np.uint8:
        scale = 255.0
    else:
        arr = arr.astype(np.int64)
        scale = float(_QUANT)
    return (arr.astype(np.float64) / scale).astype(np.float32)[None, :, :]


def load_folder(path: str | Path) -> Dataset:
    """Load a paired-PNG folder in sorted id order.

    A missing pair member is an error naming the id; mask values at or
    above the manifest class count are rejected.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {root}")
    manifest = None
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    img_ids = {p.name[: -len("_img.png")] for p in root.glob("*_img.png")}
    mask_ids = {p.name[: -len("_mask.png")] for p in root.glob("*_mask.png")}
    for missing in sorted(img_ids - mask_ids):
        raise FileNotFoundError(f"sample {missing!r}: mask file missing")
    for missing in sorted(mask_ids - img_ids):
        raise FileNotFoundError(f"sample {missing!r}: image file missing")
    ids = sorted(img_ids)
    spacing = None
    if manifest and manifest.get("spacing"):
        spacing = tuple(manifest["spacing"])
    samples = []
    for sid in ids:
        image = _read_image(root / f"{sid}_img.png")
        label = np.asarray(Image.open(root / f"{sid}_mask.png")).astype(np.int64)
        samples.append(Sample(image=image, label=label, id=sid, spacing=spacing))
    if manifest:
        num_classes = int(manifest["num_classes"])
        names = manifest.get("class_names") or []
    else:
        num_classes = int(max((s.label.max() for s in samples), default=1)) + 1
        names = []
    for s in samples:
        s.validate(num_classes)
    return Dataset(samples=samples, num_classes=num_classes, class_names=names)


def preprocess(sample: Sample, target_size: int) -> Sample:
    """Resize (bilinear image, nearest label) and normalise to [-1, 1].

    Intensity is min-max scaled per image; a constant image maps to all
    zeros and is logged.
    """
    sample.validate()
    img = torch.from_numpy(np.ascontiguousarray(sample.image)).unsqueeze(0).float()
    lab = torch.from_numpy(np.ascontiguousarray(sample.label)).unsqueeze(0).unsqueeze(0).float()
    if img.shape[-1] != target_size or img.shape[-2] != target_size:
        img = F.interpolate(img, size=(target_size, target_size), mode="bilinear",
                            align_corners=False)
        lab = F.interpolate(lab, size=(target_size, target_size), mode="nearest")
    image = img[0].numpy()
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        image = (image - lo) / (hi - lo)
        image = (image - 0.5) / 0.5
    else:
        log.warning("sample %s: constant image, normalised to zeros", sample.id)
        image = np.zeros_like(image)
    return Sample(
        image=image.astype(np.float32),
        label=lab[0, 0].numpy().astype(np.int64),
        id=sample.id,
        spacing=sample.spacing,
    )


def _transform_rng(sample_id: str, epoch: int, seed: int) -> np.random.Generator:
    digest = sha256(sample_id.encode()).digest()
    return np.random.default_rng((seed, epoch, int.from_bytes(digest[:8], "little")))


def augment(sample: Sample, seed: int, epoch: int = 0, enabled: bool = True) -> Sample:
    """Random flips and right-angle rotation, identical on image and label.

    The transform is a pure function of (sample id, epoch, seed).
    """
    if not enabled:
        return sample
    rng = _transform_rng(sample.id, epoch, seed)
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    quarter_turns = int(rng.integers(0, 4))
    image, label = sample.image, sample.label
    if flip_h:
        image, label = image[:, :, ::-1], label[:, ::-1]
    if flip_v:
        image, label = image[:, ::-1, :], label[::-1, :]
    if quarter_turns:
        image = np.rot90(image, quarter_turns, axes=(1, 2))
        label = np.rot90(label, quarter_turns, axes=(0, 1))
    return Sample(
        image=np.ascontiguousarray(image),
        label=np.ascontiguousarray(label),
        id=sample.id,
        spacing=sample.spacing,
    )


def split_dataset(dataset: Dataset, eval_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded train/eval split; at least one sample lands on each side."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_eval = min(max(1, int(round(n * eval_fraction))), n - 1)
    eval_idx = set(order[:n_eval].tolist())
    train = [dataset[i] for i in range(n) if i not in eval_idx]
    evals = [dataset[i] for i in range(n) if i in eval_idx]
    return (
        Dataset(train, dataset.num_classes, dataset.class_names),
        Dataset(evals, dataset.num_classes, dataset.class_names),
    )
