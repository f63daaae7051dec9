"""Deterministic synthetic image generators and a random-crop batch sampler."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import RngState

GENERATORS = ("repeated_motifs", "gaussian_noise", "gradient_fields")


@dataclass
class SyntheticDatasetSpec:
    generator: str = "repeated_motifs"
    num_images: int = 16
    height: int = 64
    width: int = 64
    motif_count: int = 3
    motif_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.num_images <= 0:
            raise ValueError("dataset must contain at least one image")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image dimensions must be positive")
        if self.motif_count <= 0 or not 0 < self.motif_size <= min(self.height, self.width):
            raise ValueError("motif size must fit inside the image")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)


def _motif(rng: np.random.Generator, size: int) -> np.ndarray:
    """A framed window: border colour, fill colour and a pane cross."""
    frame, fill = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    m = np.empty((size, size, 3))
    m[:] = frame
    b = max(1, size // 8)
    m[b:size - b, b:size - b] = fill
    c = size // 2
    m[c - b // 2:c - b // 2 + b, :] = frame
    m[:, c - b // 2:c - b // 2 + b] = frame
    return m


def _repeated_motifs(rng: np.random.Generator, spec: SyntheticDatasetSpec) -> np.ndarray:
    """Smooth background with a few window-like patterns stamped many times."""
    h, w, s = spec.height, spec.width, spec.motif_size
    top_colour, bottom_colour = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    t = np.linspace(0.0, 1.0, h)[:, None, None]
    img = np.broadcast_to((1 - t) * top_colour + t * bottom_colour, (h, w, 3)).copy()
    motifs = [_motif(rng, s) for _ in range(spec.motif_count)]
    # sparse enough that the background stays visible between windows
    stamps = max(1, (h * w) // (4 * s * s))
    for _ in range(stamps):
        m = motifs[rng.integers(len(motifs))]
        top, left = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        img[top:top + s, left:left + s] = m
    return img


def _gaussian_noise(rng: np.random.Generator, spec: SyntheticDatasetSpec) -> np.ndarray:
    return rng.normal(128.0, 40.0, (spec.height, spec.width, 3))


def _gradient_fields(rng: np.random.Generator, spec: SyntheticDatasetSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.height, 0:spec.width] / max(spec.height, spec.width)
    img = np.empty((spec.height, spec.width, 3))
    for c in range(3):
        a, b, base = rng.uniform(-255, 255, 3)
        freq, phase = rng.uniform(1, 6), rng.uniform(0, 2 * np.pi)
        img[..., c] = 128 + base / 4 + a * (xx - 0.5) + b * (yy - 0.5) + 20 * np.sin(freq * np.pi * xx + phase)
    return img


_FUNCS = {"repeated_motifs": _repeated_motifs, "gaussian_noise": _gaussian_noise,
          "gradient_fields": _gradient_fields}


def generate(spec: SyntheticDatasetSpec) -> np.ndarray:
    """``uint8 [num_images, height, width, 3]``, fully determined by ``spec``."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    fn = _FUNCS[spec.generator]
    imgs = [np.clip(np.round(fn(rng, spec)), 0, 255) for _ in range(spec.num_images)]
    return np.stack(imgs).astype(np.uint8)


def load_directory(path) -> list:
    """All ``*.ppm`` images in ``path`` sorted by name."""
    from .coder import read_ppm

    files = sorted(Path(path).glob("*.ppm"))
    if not files:
        raise ValueError(f"no .ppm images found in {path}")
    return [read_ppm(f) for f in files]


def write_dataset(images, out_dir) -> list:
    from .coder import write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out / f"img_{i:04d}.ppm"
        write_ppm(p, img)
        paths.append(p)
    return paths


def sample_batch(images, batch_size: int, patch: int, rng: RngState, dtype=np.float64) -> np.ndarray:
    """Random ``patch x patch`` crops scaled to [0, 1], shape ``[B, patch, patch, 3]``."""
    out = np.empty((batch_size, patch, patch, 3), dtype=dtype)
    for b in range(batch_size):
        img = images[int(rng.integers(0, len(images)))]
        h, w = img.shape[:2]
        if h < patch or w < patch:
            raise ValueError(f"image {h}x{w} is smaller than the {patch} patch")
        top = int(rng.integers(0, h - patch + 1))
        left = int(rng.integers(0, w - patch + 1))
        out[b] = img[top:top + patch, left:left + patch] / 255.0
    return out


def validation_images(spec: SyntheticDatasetSpec, count: int = 4, offset: int = 10_000) -> np.ndarray:
    """Held-out images from the same generator with a shifted seed."""
    held = SyntheticDatasetSpec(**{**spec.to_dict(), "num_images": count, "seed": spec.seed + offset})
    return generate(held)


def crop16(img: np.ndarray, size: Optional[int] = None) -> np.ndarray:
    """Top-left crop to multiples of 16 (or to ``size``)."""
    h, w = img.shape[:2]
    h2, w2 = (size, size) if size else (h - h % 16, w - w % 16)
    return img[:h2, :w2]
