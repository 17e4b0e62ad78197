"""Deterministic synthetic 16x16 grayscale datasets.

Each latent class is a parametric pattern family (oriented bar, ring,
checker, blob, corner-gradient, two-dot, cross, stripe); counts beyond
eight cycle through the families with perturbed parameters. Samples get
position jitter (+-2 px), amplitude jitter (+-20%) and additive noise
(sigma 0.05), then are clamped to [0,1] and quantized to float32 precision
so that the binary file format below roundtrips losslessly.

File format (little-endian): magic "BMSD", u32 version=1, u32 image count,
u16 width, u16 height, u16 channels, then per image an i32 latent class
(-1 if stripped) followed by width*height*channels f32 pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import Image
from .errors import ValidationError
from .rng import derive_seed, generator

SIZE = 16

_MAGIC = b"BMSD"
_VERSION = 1


@dataclass(frozen=True)
class SyntheticDataset:
    images: tuple[Image, ...]
    latent: np.ndarray          # int32 per image, -1 where stripped
    class_count: int
    per_class: int
    seed: int

    def __len__(self) -> int:
        return len(self.images)

    def labeled(self) -> bool:
        return bool(np.all(self.latent >= 0))

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.latent) if c >= 0)


def _grids():
    y, x = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return x, y


def _render(family: int, variant: int, cx: float, cy: float) -> np.ndarray:
    # Thin, extended structures: the +-2 px jitter makes single exemplars
    # poor raw-pixel anchors (little self-overlap under shift), while the
    # 20-sample class means stay geometrically distinct, which keeps the
    # nearest-centroid floor intact and leaves headroom for learned
    # shift-invariant features.
    x, y = _grids()
    if family == 0:  # oriented bar
        phi = np.deg2rad(30.0 + 20.0 * variant)
        d = np.abs((x - cx) * np.sin(phi) - (y - cy) * np.cos(phi))
        return (d <= 1.2).astype(np.float64)
    if family == 1:  # ring
        r = 5.5 + variant
        d = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
        return (np.abs(d - r) <= 1.2).astype(np.float64)
    if family == 2:  # quadrant-scale checkerboard
        b = 8
        return (((x - cx + 24) // b + (y - cy + 24) // b + variant) % 2).astype(np.float64)
    if family == 3:  # gaussian blob
        s = 1.9
        return np.exp(-(((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s)))
    if family == 4:  # corner gradient, concentrated
        corners = [(0, 0), (0, SIZE - 1), (SIZE - 1, 0), (SIZE - 1, SIZE - 1)]
        gx, gy = corners[variant % 4]
        d = np.abs(x - gx) + np.abs(y - gy)
        return (1.0 - d / d.max()) ** 3
    if family == 5:  # two sharp dots, widely separated
        phi = np.deg2rad(105.0 + 45.0 * variant)
        ox, oy = 4.5 * np.cos(phi), 4.5 * np.sin(phi)
        d1 = (x - cx - ox) ** 2 + (y - cy - oy) ** 2
        d2 = (x - cx + ox) ** 2 + (y - cy + oy) ** 2
        return np.exp(-d1 / 1.8) + np.exp(-d2 / 1.8)
    if family == 6:  # cross
        arm = 0.9 + 0.3 * variant
        return (
            (np.abs(x - cx) <= arm) | (np.abs(y - cy) <= arm)
        ).astype(np.float64)
    # thin stripes
    phi = np.deg2rad(20.0 + 30.0 * variant)
    period = 5.0 + variant
    t = (x * np.cos(phi) + y * np.sin(phi)) % period
    return (t < 1.8).astype(np.float64)


def _quantize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32).astype(np.float64)


def generate(class_count: int, per_class: int, seed: int) -> SyntheticDataset:
    """Class-structured dataset; a pure function of its arguments."""
    if class_count < 2:
        raise ValidationError("class_count must be >= 2")
    if per_class < 2:
        raise ValidationError("per_class must be >= 2")
    images: list[Image] = []
    latent = np.empty(class_count * per_class, dtype=np.int32)
    for cls in range(class_count):
        family, variant = cls % 8, cls // 8
        for k in range(per_class):
            rng = generator(derive_seed(seed, cls, k))
            dx, dy = rng.integers(-2, 3, size=2)
            base = _render(family, variant, 7.5 + float(dx), 7.5 + float(dy))
            amp = rng.uniform(0.8, 1.2)
            noisy = amp * base + rng.normal(0.0, 0.05, size=base.shape)
            images.append(Image(_quantize(np.clip(noisy, 0.0, 1.0))))
            latent[cls * per_class + k] = cls
    latent.flags.writeable = False
    return SyntheticDataset(tuple(images), latent, class_count, per_class, seed)


def split(dataset: SyntheticDataset, train_fraction_of_classes: float,
          seed: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Class-disjoint split; the train side has its latent labels stripped."""
    classes = dataset.classes()
    n_train = round(len(classes) * train_fraction_of_classes)
    if n_train < 2 or len(classes) - n_train < 2:
        raise ValidationError(
            f"split needs >= 2 classes per side, got {n_train}/{len(classes) - n_train}")
    order = generator(derive_seed(seed, 0x59717)).permutation(len(classes))
    train_classes = {classes[i] for i in order[:n_train]}

    def take(selector, strip):
        idx = [i for i, c in enumerate(dataset.latent) if (c in train_classes) == selector]
        lat = np.full(len(idx), -1, dtype=np.int32) if strip else dataset.latent[idx]
        lat.flags.writeable = False
        return SyntheticDataset(tuple(dataset.images[i] for i in idx), lat,
                                dataset.class_count, dataset.per_class, dataset.seed)

    return take(True, strip=True), take(False, strip=False)


def centroid_accuracy(dataset: SyntheticDataset) -> float:
    """Leave-one-out nearest-centroid accuracy on raw pixels."""
    if not dataset.labeled():
        raise ValidationError("centroid oracle needs latent labels")
    X = np.stack([img.vector() for img in dataset.images])
    y = np.asarray(dataset.latent)
    classes = dataset.classes()
    sums = {c: X[y == c].sum(axis=0) for c in classes}
    counts = {c: int((y == c).sum()) for c in classes}
    hits = 0
    for i in range(len(X)):
        best, best_d = None, np.inf
        for c in classes:
            n = counts[c] - (1 if c == y[i] else 0)
            if n == 0:
                continue
            centroid = (sums[c] - (X[i] if c == y[i] else 0)) / n
            d = float(np.sum((X[i] - centroid) ** 2))
            if d < best_d:
                best, best_d = c, d
        hits += best == y[i]
    return hits / len(X)


def save_dataset(path, dataset: SyntheticDataset) -> None:
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIHHH", _VERSION, len(dataset.images),
                             SIZE, SIZE, 1))
        for img, cls in zip(dataset.images, dataset.latent):
            fh.write(struct.pack("<i", int(cls)))
            fh.write(img.pixels.astype("<f4").tobytes())


def load_dataset(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValidationError(f"{path}: not a dataset file (bad magic)")
    version, count, width, height, channels = struct.unpack_from("<IIHHH", raw, 4)
    if version != _VERSION:
        raise ValidationError(f"{path}: unsupported dataset version {version}")
    if (width, height, channels) != (SIZE, SIZE, 1):
        raise ValidationError(f"{path}: unsupported geometry {width}x{height}x{channels}")
    offset = 4 + struct.calcsize("<IIHHH")
    images, latent = [], np.empty(count, dtype=np.int32)
    px_bytes = width * height * 4
    for i in range(count):
        (latent[i],) = struct.unpack_from("<i", raw, offset)
        offset += 4
        px = np.frombuffer(raw, dtype="<f4", count=width * height, offset=offset)
        images.append(Image(px.astype(np.float64).reshape(height, width)))
        offset += px_bytes
    if offset != len(raw):
        raise ValidationError(f"{path}: trailing bytes in dataset file")
    latent.flags.writeable = False
    classes = sorted({int(c) for c in latent if c >= 0})
    per_class = count // len(classes) if classes else 0
    return SyntheticDataset(tuple(images), latent, len(classes) or 0,
                            per_class, seed=-1)
