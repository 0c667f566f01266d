"""Seeded geometric and spectral augmentation of RGB patches.

Works on any ``uint8`` ``(H, W, 3)`` square image, so the same transforms can
be applied to full 200 px patches or to patches already reduced to the
network input size.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .imaging import PatchImage, hsv_to_rgb, rgb_to_hsv


@dataclass(frozen=True)
class AugmentConfig:
    geometric: bool = True
    hue: bool = True
    gamma: bool = True
    noise: bool = True
    hue_shift_max: float = 18.0  # degrees
    gamma_range: tuple[float, float] = (0.7, 1.4)
    noise_sigma_max: float = 5.0  # in units of 1/255
    rotation_mode: str = "quarter-turns"

    def __post_init__(self):
        lo, hi = self.gamma_range
        if not (0 < lo <= 1 <= hi):
            raise ValueError(f"gamma_range must satisfy 0 < lo <= 1 <= hi, got {self.gamma_range}")
        if self.hue_shift_max < 0 or self.noise_sigma_max < 0:
            raise ValueError("augmentation maxima must be non-negative")
        if self.rotation_mode != "quarter-turns":
            raise ValueError(f"unsupported rotation mode {self.rotation_mode!r}")
        object.__setattr__(self, "gamma_range", (float(lo), float(hi)))

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(geometric=False, hue=False, gamma=False, noise=False)

    @property
    def spectral(self) -> bool:
        return self.hue or self.gamma or self.noise


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def geometric(pixels: np.ndarray, k: int, flip_h: bool, flip_v: bool) -> np.ndarray:
    """Rotate by ``k`` quarter-turns, then optionally mirror left-right / up-down."""
    out = np.rot90(pixels, k % 4, axes=(0, 1))
    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1]
    return np.ascontiguousarray(out)


def spectral(pixels: np.ndarray, hue_shift: float, gamma: float, noise: np.ndarray | None) -> np.ndarray:
    """Hue rotation and value-channel gamma in HSV, then additive noise, clamped to 8 bits."""
    if hue_shift != 0.0 or gamma != 1.0:
        hsv = rgb_to_hsv(pixels)
        # float64 scalars so the arithmetic matches the batched path
        hsv[..., 0] = (hsv[..., 0] + np.float64(hue_shift)) % 360.0
        if gamma != 1.0:
            hsv[..., 2] = hsv[..., 2] ** np.float64(gamma)
        out = hsv_to_rgb(hsv, quantize=False)
    else:
        out = pixels.astype(np.float64)
    if noise is not None:
        out = out + noise
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _pixels(patch) -> np.ndarray:
    return patch.pixels if isinstance(patch, PatchImage) else np.asarray(patch)


def _rewrap(patch, pixels: np.ndarray):
    if isinstance(patch, PatchImage):
        return PatchImage(pixels, patch.source_id, patch.centroid)
    return pixels


def random_geometric(patch, rng: np.random.Generator):
    k = int(rng.integers(0, 4))
    flip_h, flip_v = (bool(b) for b in rng.integers(0, 2, size=2))
    return _rewrap(patch, geometric(_pixels(patch), k, flip_h, flip_v))


def random_spectral(patch, config: AugmentConfig, rng: np.random.Generator):
    pixels = _pixels(patch)
    # draw every variate regardless of flags so streams stay aligned
    u = rng.uniform(-1.0, 1.0)
    g = rng.uniform(*config.gamma_range)
    sigma = rng.uniform(0.0, 1.0) * config.noise_sigma_max
    hue_shift = u * config.hue_shift_max if config.hue else 0.0
    gamma = g if config.gamma else 1.0
    noise = None
    if config.noise:
        noise = rng.standard_normal(pixels.shape) * sigma
    return _rewrap(patch, spectral(pixels, hue_shift, gamma, noise))


def augment(patch, config: AugmentConfig, rng: np.random.Generator):
    """Geometric then spectral augmentation; a pure function of (patch, config, rng state)."""
    if config.geometric:
        patch = random_geometric(patch, rng)
    if config.spectral:
        patch = random_spectral(patch, config, rng)
    return patch


def augment_batch(stack: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    """Augment ``uint8 [N, H, W, 3]`` images, each with its own random draw.

    ``rng`` is one generator, consumed exactly as ``N`` sequential
    :func:`augment` calls would, or a sequence of ``N`` generators, one per
    image.  The colour math runs once over the whole stack.
    """
    stack = np.asarray(stack)
    n = len(stack)
    rngs = [rng] * n if isinstance(rng, np.random.Generator) else list(rng)
    if len(rngs) != n:
        raise ValueError(f"{len(rngs)} generators for {n} images")
    out = np.empty_like(stack)
    hue = np.zeros(n)
    gamma = np.ones(n)
    noise = np.zeros(stack.shape) if config.noise else None
    for i in range(n):
        img = stack[i]
        rng = rngs[i]
        if config.geometric:
            k = int(rng.integers(0, 4))
            flip_h, flip_v = (bool(b) for b in rng.integers(0, 2, size=2))
            img = geometric(img, k, flip_h, flip_v)
        out[i] = img
        if config.spectral:
            u = rng.uniform(-1.0, 1.0)
            g = rng.uniform(*config.gamma_range)
            sigma = rng.uniform(0.0, 1.0) * config.noise_sigma_max
            if config.hue:
                hue[i] = u * config.hue_shift_max
            if config.gamma:
                gamma[i] = g
            if config.noise:
                noise[i] = rng.standard_normal(img.shape) * sigma
    if not config.spectral:
        return out
    if np.any(hue != 0) or np.any(gamma != 1):
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hue[:, None, None]) % 360.0
        hsv[..., 2] = hsv[..., 2] ** gamma[:, None, None]
        values = hsv_to_rgb(hsv, quantize=False)
    else:
        values = out.astype(np.float64)
    if noise is not None:
        values = values + noise
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def content_streams(stack: np.ndarray, seed: int) -> list[np.random.Generator]:
    """One generator per image, keyed by ``seed`` and the image bytes.

    Identical images get identical draws, so augmenting a bag this way does
    not depend on patch order or duplication.
    """
    out = []
    for img in stack:
        digest = hashlib.blake2b(np.ascontiguousarray(img).tobytes(), digest_size=16).digest()
        words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
        words += [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
        out.append(np.random.default_rng(np.random.SeedSequence(words)))
    return out
