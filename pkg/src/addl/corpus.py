"""Seeded synthetic luminance images standing in for a natural training set."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .pgm import read_pgm

KINDS = ("grating", "edge", "noise", "split_grating")


def grating(rng: np.random.Generator, h: int, w: int, freq=(0.03, 0.30)) -> np.ndarray:
    """Oriented sinusoid; ``freq`` in cycles per pixel."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    f = rng.uniform(*freq)
    ang = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.15, 0.45)
    mean = rng.uniform(0.5 - (0.5 - amp) * 0.8, 0.5 + (0.5 - amp) * 0.8)
    u = xx * np.cos(ang) + yy * np.sin(ang)
    return np.clip(mean + amp * np.sin(2 * np.pi * f * u + phase), 0.0, 1.0)


def step_edge(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = rng.uniform(0, 2 * np.pi)
    cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
    side = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
    a, b = rng.uniform(0.05, 0.95, size=2)
    img = np.where(side > 0, a, b)
    blur = rng.uniform(0.0, 1.0)
    if blur > 0.3:
        img = gaussian_filter(img, blur, mode="reflect")
    return np.clip(img, 0.0, 1.0)


def filtered_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = gaussian_filter(rng.standard_normal((h, w)), rng.uniform(0.8, 3.0), mode="wrap")
    img = (img - img.mean()) / (img.std() + 1e-12)
    return np.clip(0.5 + rng.uniform(0.08, 0.2) * img, 0.0, 1.0)


def split_grating(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Two different gratings meeting at a straight boundary."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = rng.uniform(0, 2 * np.pi)
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    mask = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang) > 0
    return np.where(mask, grating(rng, h, w), grating(rng, h, w))


_GENERATORS = {
    "grating": grating,
    "edge": step_edge,
    "noise": filtered_noise,
    "split_grating": split_grating,
}


class ToyCorpus:
    """Infinite seeded stream of synthetic patches, plus optional PGM crops."""

    def __init__(self, kinds=KINDS, weights=None, directory: str | Path | None = None):
        self.kinds = tuple(kinds)
        w = np.ones(len(self.kinds)) if weights is None else np.asarray(weights, dtype=np.float64)
        self.weights = w / w.sum()
        self.images: list[np.ndarray] = []
        if directory is not None:
            paths = sorted(Path(directory).glob("*.pgm"))
            if not paths:
                raise FileNotFoundError(f"no .pgm files in {directory}")
            self.images = [read_pgm(p) for p in paths]

    def sample(self, rng: np.random.Generator, h: int, w: int | None = None) -> np.ndarray:
        w = h if w is None else w
        if self.images and rng.random() < 0.5:
            return self._crop(rng, h, w)
        kind = self.kinds[rng.choice(len(self.kinds), p=self.weights)]
        return _GENERATORS[kind](rng, h, w)

    def _crop(self, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
        usable = [im for im in self.images if im.shape[0] >= h and im.shape[1] >= w]
        if not usable:
            raise ValueError(f"no corpus image is at least {h}x{w}")
        im = usable[rng.integers(len(usable))]
        i = rng.integers(im.shape[0] - h + 1)
        j = rng.integers(im.shape[1] - w + 1)
        return im[i : i + h, j : j + w].copy()

    def batch(self, rng: np.random.Generator, n: int, size: int) -> np.ndarray:
        return np.stack([self.sample(rng, size) for _ in range(n)])[:, None]


def heldout_gratings(n: int, size: int, seed: int = 1234) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [grating(rng, size, size) for _ in range(n)]


def toy_images(n: int, size: int, seed: int = 99) -> list[np.ndarray]:
    """Mixed-kind evaluation images (a fixed, seeded set)."""
    rng = np.random.default_rng(seed)
    return [_GENERATORS[KINDS[i % len(KINDS)]](rng, size, size) for i in range(n)]
