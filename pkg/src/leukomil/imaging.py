"""Nucleus segmentation and patch extraction for stained blood-film fields.

Pipeline: RGB -> HSV, Otsu threshold on saturation, binary opening, distance
transform watershed, small-blob removal, then a fixed-size crop around each
remaining blob centroid.

Images are plain numpy arrays: RGB is ``uint8`` of shape ``(H, W, 3)``, HSV is
``float32`` with hue in degrees ``[0, 360)`` and saturation/value in ``[0, 1]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from skimage.feature import peak_local_max
from skimage.segmentation import watershed

logger = logging.getLogger(__name__)

PATCH_SIZE = 200


class DegenerateInputError(ValueError):
    """Raised when a threshold cannot be computed (e.g. a constant channel)."""


@dataclass(frozen=True)
class SegmentationParams:
    opening_radius: int = 5
    min_marker_distance: int = 20
    min_area: int = 800
    otsu_bins: int = 256
    patch_size: int = PATCH_SIZE


@dataclass
class Blob:
    label: int
    area: int
    centroid: tuple[float, float]
    pixels: np.ndarray = field(repr=False)  # (area, 2) int array of (row, col)


@dataclass
class PatchImage:
    pixels: np.ndarray = field(repr=False)
    source_id: str = ""
    centroid: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"patch must be uint8 (H, W, 3), got {self.pixels.dtype} {self.pixels.shape}")


# ---------------------------------------------------------------------------
# colour space


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV.  Saturation is 0 where the max channel is 0."""
    rgb = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    vmax = rgb.max(axis=-1)
    vmin = rgb.min(axis=-1)
    delta = vmax - vmin
    safe = np.where(delta > 0, delta, 1).astype(np.float32)

    hue = np.zeros_like(vmax)
    rmax = (vmax == r) & (delta > 0)
    gmax = (vmax == g) & (delta > 0) & ~rmax
    bmax = (delta > 0) & ~rmax & ~gmax
    hue = np.where(rmax, ((g - b) / safe) % 6, hue)
    hue = np.where(gmax, (b - r) / safe + 2, hue)
    hue = np.where(bmax, (r - g) / safe + 4, hue)
    hue = (hue * 60).astype(np.float32)
    hue[hue >= 360] -= 360

    return np.stack([hue, saturation(img), vmax.astype(np.float32)], axis=-1)


def saturation(img: np.ndarray) -> np.ndarray:
    """Saturation channel of :func:`rgb_to_hsv`, computed without hue."""
    rgb = np.asarray(img)
    vmax = rgb.max(axis=-1).astype(np.float32)
    vmin = rgb.min(axis=-1).astype(np.float32)
    return np.where(vmax > 0, (vmax - vmin) / np.where(vmax > 0, vmax, 1), 0).astype(np.float32)


def hsv_to_rgb(hsv: np.ndarray, quantize: bool = True) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`.

    Returns ``uint8`` (rounded) by default, or float values in ``[0, 255]``
    with ``quantize=False``.
    """
    hsv = np.asarray(hsv, dtype=np.float64)
    h = (hsv[..., 0] % 360) / 60.0
    s = np.clip(hsv[..., 1], 0, 1)
    v = np.clip(hsv[..., 2], 0, 1)
    c = v * s
    x = c * (1 - np.abs(h % 2 - 1))
    m = v - c
    sector = np.floor(h).astype(np.int64) % 6
    zeros = np.zeros_like(c)
    # per sector: (r, g, b) before adding m
    choices_r = [c, x, zeros, zeros, x, c]
    choices_g = [x, c, c, x, zeros, zeros]
    choices_b = [zeros, zeros, x, c, c, x]
    r = np.choose(sector, choices_r) + m
    g = np.choose(sector, choices_g) + m
    b = np.choose(sector, choices_b) + m
    out = np.stack([r, g, b], axis=-1) * 255.0
    if not quantize:
        return out
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# thresholding


def histogram_bins(channel: np.ndarray, bins: int = 256) -> np.ndarray:
    """Bin index for each value in ``[0, 1]``.

    Bin ``k`` holds values in ``(k/bins, (k+1)/bins]`` (bin 0 also holds 0),
    so "bin >= t" is the same set as "value > t/bins".
    """
    edges = np.arange(1, bins, dtype=np.float64) / bins
    return np.searchsorted(edges, np.asarray(channel, dtype=np.float64), side="left")


def otsu_cut(hist) -> int:
    """Cut index ``t`` in ``1..len(hist)-1`` maximising between-class variance.

    Classes are bins ``< t`` and bins ``>= t``.  All arithmetic is on
    integers, so ties are exact; the lowest tied cut wins.
    """
    hist = [int(h) for h in hist]
    if any(h < 0 for h in hist):
        raise ValueError("histogram counts must be non-negative")
    total = sum(hist)
    weighted = sum(k * h for k, h in enumerate(hist))
    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(1, len(hist)):
        n0 += hist[t - 1]
        s0 += (t - 1) * hist[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance times total**2 == (total*s0 - n0*S)^2 / (n0*n1)
        num = (total * s0 - n0 * weighted) ** 2
        den = n0 * n1
        if num == 0:
            continue
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None:
        raise DegenerateInputError("histogram has a single occupied bin; no threshold separates it")
    return best_t


def otsu_threshold(channel: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold of a ``[0, 1]`` channel; foreground is ``channel > threshold``."""
    idx = histogram_bins(channel, bins)
    hist = np.bincount(idx.ravel(), minlength=bins)
    return otsu_cut(hist) / bins


# ---------------------------------------------------------------------------
# morphology


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def binary_opening(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erosion then dilation by a Euclidean disk.

    Pixels outside the image count as foreground for the erosion, so objects
    touching the border are not eaten from that side.  With that convention
    erosion and dilation are adjoint, hence the opening is idempotent.
    """
    if radius < 1:
        raise ValueError(f"opening radius must be >= 1, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    se = disk(radius)
    eroded = ndi.binary_erosion(mask, structure=se, border_value=1)
    return ndi.binary_dilation(eroded, structure=se, border_value=0)


def watershed_split(mask: np.ndarray, min_marker_distance: int) -> np.ndarray:
    """Split touching objects with a marker watershed on the distance map.

    Returns an ``int32`` label image; background is 0 and every foreground
    pixel gets exactly one positive label.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.int32)
    dist = ndi.distance_transform_edt(mask)
    components, n_comp = ndi.label(mask)
    peaks = peak_local_max(
        dist,
        min_distance=max(1, int(min_marker_distance)),
        labels=components,
        exclude_border=False,
    )
    markers = np.zeros(mask.shape, dtype=np.int32)
    for i, (r, c) in enumerate(sorted(map(tuple, peaks)), start=1):
        markers[r, c] = i
    # every component needs a seed, otherwise its pixels would stay unlabeled
    seeded = np.zeros(n_comp + 1, dtype=bool)
    seeded[components[markers > 0]] = True
    next_label = int(markers.max()) + 1
    if not seeded[1:].all():
        flat_dist = dist.ravel()
        flat_comp = components.ravel()
        for comp in np.flatnonzero(~seeded[1:]) + 1:
            members = np.flatnonzero(flat_comp == comp)
            best = members[np.argmax(flat_dist[members])]
            markers.ravel()[best] = next_label
            next_label += 1
    labels = watershed(-dist, markers, mask=mask)
    return labels.astype(np.int32)


def filter_blobs(labels: np.ndarray, min_area: int) -> list[Blob]:
    """Blobs with ``area >= min_area``, sorted by centroid (row, col)."""
    if min_area < 1:
        raise ValueError(f"min_area must be >= 1, got {min_area}")
    labels = np.asarray(labels)
    rows, cols = np.nonzero(labels)
    ids = labels[rows, cols]
    order = np.argsort(ids, kind="stable")
    rows, cols, ids = rows[order], cols[order], ids[order]
    uniq, starts, counts = np.unique(ids, return_index=True, return_counts=True)
    blobs = []
    for lab, start, count in zip(uniq, starts, counts):
        if count < min_area:
            continue
        r = rows[start:start + count]
        c = cols[start:start + count]
        blobs.append(
            Blob(
                label=int(lab),
                area=int(count),
                centroid=(float(r.mean()), float(c.mean())),
                pixels=np.stack([r, c], axis=1),
            )
        )
    blobs.sort(key=lambda b: b.centroid)
    return blobs


# ---------------------------------------------------------------------------
# cropping


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_patch(img: np.ndarray, centroid, size: int = PATCH_SIZE, source_id: str = "") -> PatchImage:
    """``size`` x ``size`` window centred on the rounded centroid.

    Out-of-bounds pixels are filled by mirror reflection (edge pixel not
    repeated), so the centroid always lands on pixel ``(size//2, size//2)``.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    r = _round_half_up(centroid[0])
    c = _round_half_up(centroid[1])
    half = size // 2
    top, left = r - half, c - half
    bottom, right = top + size, left + size
    if top >= 0 and left >= 0 and bottom <= h and right <= w:
        pixels = img[top:bottom, left:right].copy()
    else:
        rows = _reflect_index(np.arange(top, bottom), h)
        cols = _reflect_index(np.arange(left, right), w)
        pixels = img[rows[:, None], cols[None, :]]
    return PatchImage(np.ascontiguousarray(pixels, dtype=np.uint8), source_id, (float(centroid[0]), float(centroid[1])))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m)


# ---------------------------------------------------------------------------
# full pipeline


def segment_mask(img: np.ndarray, params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    sat = saturation(img)
    threshold = otsu_threshold(sat, params.otsu_bins)
    fg = sat.astype(np.float64) > threshold
    return binary_opening(fg, params.opening_radius)


def segment_blobs(img: np.ndarray, params: SegmentationParams = SegmentationParams()) -> list[Blob]:
    try:
        mask = segment_mask(img, params)
    except DegenerateInputError as exc:
        logger.info("no threshold for field: %s", exc)
        return []
    labels = watershed_split(mask, params.min_marker_distance)
    return filter_blobs(labels, params.min_area)


def segment_field(
    img: np.ndarray, params: SegmentationParams = SegmentationParams(), source_id: str = ""
) -> list[PatchImage]:
    """Segment nuclei in one RGB field and crop a patch around each."""
    return [
        crop_patch(img, b.centroid, params.patch_size, source_id)
        for b in segment_blobs(img, params)
    ]


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def match_centroids(predicted, truth, match_radius: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by ascending distance (ties: lower indices first)."""
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    true = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or len(true) == 0:
        return []
    d = np.sqrt(((pred[:, None, :] - true[None, :, :]) ** 2).sum(axis=-1))
    pi, ti = np.nonzero(d <= match_radius)
    order = np.lexsort((ti, pi, d[pi, ti]))
    used_p, used_t, pairs = set(), set(), []
    for k in order:
        i, j = int(pi[k]), int(ti[k])
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((i, j))
    return pairs


def segmentation_score(predicted, truth, match_radius: float) -> tuple[float, float]:
    """(precision, recall) of predicted centroids against ground truth."""
    tp = len(match_centroids(predicted, truth, match_radius))
    return precision_recall(tp, len(predicted) - tp, len(truth) - tp)
