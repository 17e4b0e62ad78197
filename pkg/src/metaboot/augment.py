"""Seeded image augmentations and the four ablation levels.

Six transform kinds over single-channel images in [0,1]: crop-resize,
horizontal-flip, rotate90, gaussian-noise, brightness-scale, cutout. Every
transform preserves shape, clamps back into [0,1], and is a pure function
of (image, spec, seed), so view generation is reproducible and safe to
parallelize.

The ablation levels pair an augmentation count with an intensity: A1/A2
draw from a single kind (crop-resize), A3/A4 from five kinds; A1/A3 are
mild, A2/A4 strong. Horizontal flip has no intensity knob and is the kind
left out of the five-kind set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .rng import derive_seed, generator

KINDS = (
    "crop-resize",
    "horizontal-flip",
    "rotate90",
    "gaussian-noise",
    "brightness-scale",
    "cutout",
)

FIVE_KINDS = (
    "crop-resize",
    "rotate90",
    "gaussian-noise",
    "brightness-scale",
    "cutout",
)

# Parameter ranges by intensity; the "hard" bounds are validity invariants.
# Crop's mild/strong split is part of the contract; the other splits are
# calibrated so intensity shifts behaviour without dominating it.
_RANGES = {
    "crop-resize": {"mild": (0.8, 1.0), "strong": (0.5, 1.0), "hard": (0.5, 1.0)},
    "gaussian-noise": {"mild": (0.0, 0.08), "strong": (0.0, 0.12), "hard": (0.0, 0.25)},
    "brightness-scale": {"mild": (0.85, 1.15), "strong": (0.7, 1.3), "hard": (0.6, 1.4)},
    "cutout": {"mild": (0.05, 0.12), "strong": (0.08, 0.2), "hard": (0.0, 0.4)},
}

_PARAM_KEY = {
    "crop-resize": "fraction",
    "gaussian-noise": "sigma",
    "brightness-scale": "factor",
    "cutout": "area",
}


@dataclass(frozen=True)
class Image:
    """Single-channel image, pixels in [0,1], row-major (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"image pixels must be 2-D, got shape {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("image pixels outside [0,1]")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1

    def vector(self) -> np.ndarray:
        """Flat row-major copy, length height*width."""
        return self.pixels.reshape(-1).copy()


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    intensity: str = "mild"

    def __post_init__(self):
        validate_spec(self)


def validate_spec(spec: AugmentationSpec) -> None:
    if spec.kind not in KINDS:
        raise ValidationError(f"unknown augmentation kind {spec.kind!r}")
    if spec.intensity not in ("mild", "strong"):
        raise ValidationError(f"intensity must be mild|strong, got {spec.intensity!r}")
    key = _PARAM_KEY.get(spec.kind)
    if key is None:
        return
    if key not in spec.params:
        raise ValidationError(f"{spec.kind} needs parameter {key!r}")
    lo, hi = _RANGES[spec.kind]["hard"]
    value = float(spec.params[key])
    if not (lo <= value <= hi):
        raise ValidationError(f"{spec.kind} {key}={value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class AugmentationLevel:
    level: str
    kinds: tuple[str, ...]
    intensity: str


LEVELS = {
    "A1": AugmentationLevel("A1", ("crop-resize",), "mild"),
    "A2": AugmentationLevel("A2", ("crop-resize",), "strong"),
    "A3": AugmentationLevel("A3", FIVE_KINDS, "mild"),
    "A4": AugmentationLevel("A4", FIVE_KINDS, "strong"),
}


def get_level(name: str) -> AugmentationLevel:
    try:
        return LEVELS[name]
    except KeyError:
        raise ValidationError(f"unknown augmentation level {name!r}") from None


def _nearest_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = pixels.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return pixels[np.ix_(rows, cols)]


def apply(image: Image, spec: AugmentationSpec, seed: int) -> Image:
    """One augmented view, fully determined by (image, spec, seed)."""
    validate_spec(spec)
    px = image.pixels
    h, w = px.shape
    rng = generator(seed)

    if spec.kind == "horizontal-flip":
        out = px[:, ::-1]
    elif spec.kind == "rotate90":
        out = np.rot90(px, k=int(rng.integers(1, 4)))
    elif spec.kind == "crop-resize":
        frac = float(spec.params["fraction"])
        ch = max(1, round(h * frac))
        cw = max(1, round(w * frac))
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
        out = _nearest_resize(px[oy:oy + ch, ox:ox + cw], h, w)
    elif spec.kind == "gaussian-noise":
        sigma = float(spec.params["sigma"])
        out = np.clip(px + rng.normal(0.0, sigma, size=px.shape), 0.0, 1.0)
    elif spec.kind == "brightness-scale":
        out = np.clip(px * float(spec.params["factor"]), 0.0, 1.0)
    elif spec.kind == "cutout":
        side = np.sqrt(float(spec.params["area"]))
        chh = max(1, round(h * side))
        cww = max(1, round(w * side))
        oy = int(rng.integers(0, h - chh + 1))
        ox = int(rng.integers(0, w - cww + 1))
        out = px.copy()
        out[oy:oy + chh, ox:ox + cww] = 0.0
    else:  # pragma: no cover
        raise ValidationError(spec.kind)
    return Image(out)


def sample_pipeline(level: AugmentationLevel, rng_seed: int) -> list[AugmentationSpec]:
    """A seeded composition of 1-3 specs from the level's kinds and intensity."""
    rng = generator(derive_seed(rng_seed, 0xA06))
    count = int(rng.integers(1, 4))
    specs = []
    for _ in range(count):
        kind = level.kinds[int(rng.integers(0, len(level.kinds)))]
        params = {}
        key = _PARAM_KEY.get(kind)
        if key is not None:
            lo, hi = _RANGES[kind][level.intensity]
            params[key] = float(rng.uniform(lo, hi))
        specs.append(AugmentationSpec(kind, params, level.intensity))
    return specs
