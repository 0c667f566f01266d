"""Synthetic blood-film generator.

Fields are pale backgrounds with nuclei ("glyphs") placed by dart-throwing
Poisson-disk sampling.  Three glyph kinds stand in for cell types:

* ``normal``      small round smooth nucleus
* ``lymphoblast`` large smooth nucleus
* ``myeloblast``  large nucleus with dark chromatin clumps

Negative ("normal") samples contain only normal glyphs.  A positive sample of
class ``ALL`` or ``AML`` replaces ``witness_fraction`` of its glyphs with the
matching abnormal kind, which mirrors the weak-label structure: the bag label
is known, the per-cell labels are not used for training.  The generator keeps
every glyph's true type and centre so cell-level metrics can be computed
exactly.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_LABELS = ("normal", "ALL", "AML")
CELL_TYPES = ("normal", "lymphoblast", "myeloblast")
WITNESS_KIND = {"normal": None, "ALL": "lymphoblast", "AML": "myeloblast"}


@dataclass(frozen=True)
class SyntheticConfig:
    samples_per_class: int = 30
    fields_per_sample: int = 1
    glyphs_per_field: int = 40
    field_height: int = 1200
    field_width: int = 1200
    min_center_distance: float = 140.0
    border_margin: int = 40
    witness_fraction: float = 0.3
    normal_radius: float = 18.0
    blast_radius: float = 27.0
    radius_jitter: float = 1.5
    clump_count: int = 8
    clump_radius: float = 6.0
    clump_darkening: float = 0.4
    background_noise: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.witness_fraction <= 1:
            raise ValueError(f"witness_fraction must be in (0, 1], got {self.witness_fraction}")
        if self.samples_per_class < 1 or self.fields_per_sample < 1 or self.glyphs_per_field < 1:
            raise ValueError("sample, field and glyph counts must be positive")


@dataclass
class Glyph:
    center: tuple[float, float]
    cell_type: str
    radius: float


@dataclass
class SyntheticField:
    field_id: str
    image: np.ndarray = field(repr=False)
    glyphs: list[Glyph]


@dataclass
class SyntheticSample:
    sample_id: str
    label: str
    fields: list[SyntheticField]


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    samples: list[SyntheticSample]
    labels: tuple[str, ...] = SAMPLE_LABELS
    cell_types: tuple[str, ...] = CELL_TYPES

    def glyph_count(self) -> int:
        return sum(len(f.glyphs) for s in self.samples for f in s.fields)


# background, nucleus and cytoplasm colours (RGB, 0-255)
_BACKGROUND = np.array([238.0, 229.0, 233.0])
_CYTOPLASM = np.array([222.0, 214.0, 232.0])
_NUCLEUS = np.array([118.0, 62.0, 152.0])


def sample_seed(seed: int, *keys) -> np.random.SeedSequence:
    """Independent stream for ``keys`` under a global seed (stable across runs)."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode("utf-8")))
    return np.random.SeedSequence(words)


def poisson_disk(rng: np.random.Generator, n: int, height: int, width: int, min_dist: float,
                 margin: int, max_attempts: int = 20000) -> list[tuple[float, float]]:
    """Dart-throwing placement of up to ``n`` points at least ``min_dist`` apart."""
    points: list[tuple[float, float]] = []
    arr = np.empty((0, 2))
    for _ in range(max_attempts):
        if len(points) == n:
            break
        p = (rng.uniform(margin, height - margin), rng.uniform(margin, width - margin))
        if len(arr) and np.min(np.hypot(arr[:, 0] - p[0], arr[:, 1] - p[1])) < min_dist:
            continue
        points.append(p)
        arr = np.asarray(points)
    if len(points) < n:
        logger.warning("placed only %d of %d glyphs", len(points), n)
    return points


def _render_glyph(img: np.ndarray, glyph: Glyph, cfg: SyntheticConfig, rng: np.random.Generator) -> None:
    r0, c0 = glyph.center
    rad = glyph.radius
    halo = rad * 1.45
    top, bottom = int(max(0, np.floor(r0 - halo - 2))), int(min(img.shape[0], np.ceil(r0 + halo + 3)))
    left, right = int(max(0, np.floor(c0 - halo - 2))), int(min(img.shape[1], np.ceil(c0 + halo + 3)))
    yy, xx = np.mgrid[top:bottom, left:right]
    d = np.hypot(yy - r0, xx - c0)
    region = img[top:bottom, left:right]

    cyto = np.clip(halo + 0.5 - d, 0, 1)[..., None]
    region[:] = region * (1 - cyto) + _CYTOPLASM * cyto

    nucleus_color = np.broadcast_to(_NUCLEUS, region.shape).copy()
    if glyph.cell_type == "myeloblast":
        shade = np.ones(d.shape)
        for _ in range(cfg.clump_count):
            ang = rng.uniform(0, 2 * np.pi)
            rr = rad * np.sqrt(rng.uniform(0, 0.7))
            cr, cc = r0 + rr * np.sin(ang), c0 + rr * np.cos(ang)
            dc = np.hypot(yy - cr, xx - cc)
            w = np.clip(cfg.clump_radius + 0.5 - dc, 0, 1)
            shade = np.minimum(shade, 1 - (1 - cfg.clump_darkening) * w)
        # scaling RGB keeps hue and saturation, only value changes
        nucleus_color *= shade[..., None]
    nuc = np.clip(rad + 0.5 - d, 0, 1)[..., None]
    region[:] = region * (1 - nuc) + nucleus_color * nuc


def _render_field(rng: np.random.Generator, glyphs: list[Glyph], cfg: SyntheticConfig) -> np.ndarray:
    img = np.empty((cfg.field_height, cfg.field_width, 3))
    img[:] = _BACKGROUND
    for g in glyphs:
        _render_glyph(img, g, cfg, rng)
    if cfg.background_noise > 0:
        img += rng.normal(0, cfg.background_noise, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_sample(cfg: SyntheticConfig, sample_id: str, label: str) -> SyntheticSample:
    rng = np.random.default_rng(sample_seed(cfg.seed, "sample", sample_id))
    witness = WITNESS_KIND[label]
    fields = []
    for f in range(cfg.fields_per_sample):
        centers = poisson_disk(rng, cfg.glyphs_per_field, cfg.field_height, cfg.field_width,
                               cfg.min_center_distance, cfg.border_margin)
        kinds = ["normal"] * len(centers)
        if witness is not None:
            n_abnormal = max(1, int(round(cfg.witness_fraction * len(centers))))
            for i in rng.choice(len(centers), size=n_abnormal, replace=False):
                kinds[int(i)] = witness
        glyphs = []
        for center, kind in zip(centers, kinds):
            base = cfg.normal_radius if kind == "normal" else cfg.blast_radius
            radius = base + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter)
            glyphs.append(Glyph((float(center[0]), float(center[1])), kind, float(radius)))
        fields.append(SyntheticField(f"f{f:02d}", _render_field(rng, glyphs, cfg), glyphs))
    return SyntheticSample(sample_id, label, fields)


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticDataset:
    """Render the full dataset.  Identical config (including seed) gives identical bytes."""
    samples = []
    for label in SAMPLE_LABELS:
        for i in range(cfg.samples_per_class):
            samples.append(generate_sample(cfg, f"{label}_{i:03d}", label))
    return SyntheticDataset(cfg, samples)


def config_dict(cfg: SyntheticConfig) -> dict:
    return asdict(cfg)
