"""Seeded synthetic identity data for the desk-scale training demo.

Each identity is a fixed low-resolution pattern upsampled to a base image;
every rendered view applies photometric jitter, pixel noise, and a random
partial crop, so matching has to cope with arbitrary-size observations.
"""

from __future__ import annotations

import numpy as np

from .encoder import ToyImage


def _base_patterns(rng: np.random.Generator, num_identities: int, shape, cells) -> np.ndarray:
    h, w = shape
    ch, cw = cells
    if h % ch or w % cw:
        raise ValueError(f"base shape {shape} must be a multiple of the cell grid {cells}")
    coarse = rng.uniform(0.1, 0.9, size=(num_identities, ch, cw))
    return np.kron(coarse, np.ones((h // ch, w // cw)))


def render_view(
    base: np.ndarray,
    rng: np.random.Generator,
    *,
    noise: float = 0.06,
    jitter: float = 0.3,
    min_crop: tuple[int, int] = (12, 10),
) -> ToyImage:
    """One observation of an identity: gain/offset jitter, additive noise,
    then a random crop of random size (a partial view)."""
    h, w = base.shape
    gain = rng.uniform(1.0 - jitter, 1.0 + jitter)
    offset = rng.uniform(-jitter / 2.0, jitter / 2.0)
    img = base * gain + offset + rng.normal(0.0, noise, size=base.shape)
    ch = int(rng.integers(min_crop[0], h + 1))
    cw = int(rng.integers(min_crop[1], w + 1))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = np.clip(img[top:top + ch, left:left + cw], 0.0, 1.0)
    return ToyImage(crop[None, :, :])


def make_identity_pools(
    num_identities: int,
    images_per_identity: int,
    seed: int,
    *,
    base_shape: tuple[int, int] = (20, 16),
    cells: tuple[int, int] = (5, 4),
    noise: float = 0.06,
    jitter: float = 0.3,
    min_crop: tuple[int, int] = (12, 10),
) -> dict[int, list[ToyImage]]:
    """Deterministic pool of rendered views per identity label."""
    rng = np.random.default_rng(seed)
    bases = _base_patterns(rng, num_identities, base_shape, cells)
    return {
        identity: [
            render_view(bases[identity], rng, noise=noise, jitter=jitter, min_crop=min_crop)
            for _ in range(images_per_identity)
        ]
        for identity in range(num_identities)
    }
