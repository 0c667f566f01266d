"""Dataset manifests, cell-annotation sets and folder ingestion.

Both file kinds are JSON Lines, UTF-8, one record per line.  The first line
is a header object; every following line is one patch record.  Patch paths
are stored relative to the manifest's directory when possible.

Manifest::

    {"format": "leukomil-manifest", "version": 1, "labels": ["normal", "ALL"], "note": "..."}
    {"sample": "s001", "label": "normal", "patch": "s001/f00_0.png"}
    {"sample": "s001", "label": "normal", "patch": "s001/f00_1.png", "field": "f00", "centroid": [r, c]}

A sample's patches appear in file order; samples are ordered by first
appearance.  ``field`` and ``centroid`` are optional.

Cell annotations::

    {"format": "leukomil-cells", "version": 1, "cell_types": ["normal", "lymphoblast"]}
    {"patch": "cells/x.png", "cell_type": "normal", "sample": "s001", "center": [r, c]}

Folder ingestion takes class names from the top-level directories, in sorted
order unless the root holds a ``labels.txt`` listing one class per line.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..imaging import PatchImage

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "leukomil-manifest"
CELLS_FORMAT = "leukomil-cells"
FORMAT_VERSION = 1
IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


class ManifestError(ValueError):
    """Raised with every violation found while loading a manifest."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class Sample:
    sample_id: str
    label: str
    patches: list = field(default_factory=list)  # paths, PatchImage or uint8 arrays
    fields: list = field(default_factory=list)
    centroids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class DatasetManifest:
    labels: tuple[str, ...]
    samples: list[Sample]
    note: str = ""

    def label_counts(self) -> dict[str, int]:
        counts = {lab: 0 for lab in self.labels}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def by_id(self) -> dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}


@dataclass
class CellAnnotation:
    patch: object
    cell_type: str
    sample_id: str = ""
    center: tuple[float, float] | None = None


@dataclass
class CellAnnotationSet:
    cell_types: tuple[str, ...]
    cells: list[CellAnnotation]

    def __len__(self) -> int:
        return len(self.cells)


# ---------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed compression level keeps the bytes reproducible
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG", compress_level=6)


def load_patch(item) -> np.ndarray:
    if isinstance(item, PatchImage):
        return item.pixels
    if isinstance(item, np.ndarray):
        return item
    return read_image(item)


# ---------------------------------------------------------------------------
# manifests


def _rel(path, base: Path) -> str:
    path = Path(path)
    try:
        return os.path.relpath(path, base).replace(os.sep, "/")
    except ValueError:
        return str(path)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": FORMAT_VERSION,
                         "labels": list(manifest.labels), "note": manifest.note}, ensure_ascii=False)]
    for s in manifest.samples:
        for i, p in enumerate(s.patches):
            if not isinstance(p, (str, os.PathLike)):
                raise TypeError(f"sample {s.sample_id}: only on-disk patches can be written to a manifest")
            rec = {"sample": s.sample_id, "label": s.label, "patch": _rel(p, base)}
            if s.fields:
                rec["field"] = s.fields[i]
            if s.centroids:
                rec["centroid"] = [round(float(v), 4) for v in s.centroids[i]]
            lines.append(json.dumps(rec, ensure_ascii=False))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_jsonl(path: Path, fmt: str) -> tuple[dict, list[tuple[int, dict]]]:
    text = Path(path).read_text(encoding="utf-8")
    rows = [(n, line) for n, line in enumerate(text.splitlines(), start=1) if line.strip()]
    if not rows:
        raise ManifestError([f"{path}: empty file"])
    try:
        header = json.loads(rows[0][1])
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}:1: bad header: {exc}"]) from None
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise ManifestError([f"{path}:1: not a {fmt} file"])
    if header.get("version") != FORMAT_VERSION:
        raise ManifestError([f"{path}:1: unsupported version {header.get('version')!r}"])
    records, problems = [], []
    for n, line in rows[1:]:
        try:
            records.append((n, json.loads(line)))
        except json.JSONDecodeError as exc:
            problems.append(f"{path}:{n}: {exc}")
    if problems:
        raise ManifestError(problems)
    return header, records


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; all problems are reported together."""
    path = Path(path)
    header, records = _read_jsonl(path, MANIFEST_FORMAT)
    labels = tuple(header.get("labels") or ())
    problems = []
    if len(set(labels)) != len(labels):
        problems.append(f"{path}:1: duplicate labels in {list(labels)}")
    samples: dict[str, Sample] = {}
    closed: set[str] = set()
    last_id = None
    for n, rec in records:
        sid, label, patch = rec.get("sample"), rec.get("label"), rec.get("patch")
        if not sid or not label or not patch:
            problems.append(f"{path}:{n}: record needs sample, label and patch")
            continue
        if label not in labels:
            problems.append(f"{path}:{n}: unknown label {label!r} for sample {sid!r}")
            continue
        if sid != last_id and sid in samples:
            closed.add(sid)
        last_id = sid
        if sid in closed:
            problems.append(f"{path}:{n}: duplicate sample id {sid!r} (records not contiguous)")
            continue
        sample = samples.get(sid)
        if sample is None:
            sample = samples[sid] = Sample(sid, label)
        elif sample.label != label:
            problems.append(f"{path}:{n}: sample {sid!r} has conflicting labels {sample.label!r}/{label!r}")
            continue
        full = Path(patch) if Path(patch).is_absolute() else path.parent / patch
        if check_files and not full.is_file():
            problems.append(f"missing patch file: {full}")
        sample.patches.append(str(full))
        if "field" in rec:
            sample.fields.append(rec["field"])
        if "centroid" in rec:
            sample.centroids.append(tuple(rec["centroid"]))
    for s in samples.values():
        if s.fields and len(s.fields) != len(s.patches):
            s.fields = []
        if s.centroids and len(s.centroids) != len(s.patches):
            s.centroids = []
    if problems:
        raise ManifestError(problems)
    return DatasetManifest(labels, list(samples.values()), header.get("note", ""))


def write_cells(cells: CellAnnotationSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": CELLS_FORMAT, "version": FORMAT_VERSION,
                         "cell_types": list(cells.cell_types)})]
    for c in cells.cells:
        rec = {"patch": _rel(c.patch, path.parent), "cell_type": c.cell_type}
        if c.sample_id:
            rec["sample"] = c.sample_id
        if c.center is not None:
            rec["center"] = [round(float(v), 4) for v in c.center]
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cells(path, check_files: bool = True) -> CellAnnotationSet:
    path = Path(path)
    header, records = _read_jsonl(path, CELLS_FORMAT)
    vocab = tuple(header.get("cell_types") or ())
    cells, problems = [], []
    for n, rec in records:
        if rec.get("cell_type") not in vocab:
            problems.append(f"{path}:{n}: cell type {rec.get('cell_type')!r} not in {list(vocab)}")
            continue
        full = Path(rec["patch"]) if Path(rec["patch"]).is_absolute() else path.parent / rec["patch"]
        if check_files and not full.is_file():
            problems.append(f"missing patch file: {full}")
        center = tuple(rec["center"]) if "center" in rec else None
        cells.append(CellAnnotation(str(full), rec["cell_type"], rec.get("sample", ""), center))
    if problems:
        raise ManifestError(problems)
    return CellAnnotationSet(vocab, cells)


# ---------------------------------------------------------------------------
# folder ingestion

CONVENTIONS = ("per-class-dirs", "all-idb", "bone-marrow")


class ConventionError(ValueError):
    pass


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _class_dirs(root: Path) -> list[Path]:
    """Class directories, in the order given by ``root/labels.txt`` if present, else sorted."""
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    order_file = root / "labels.txt"
    if order_file.is_file():
        order = [ln.strip() for ln in order_file.read_text(encoding="utf-8").splitlines() if ln.strip()]
        by_name = {d.name: d for d in dirs}
        missing = [name for name in order if name not in by_name]
        if missing:
            raise ManifestError([f"{order_file}: no directory for labels {missing}"])
        dirs = [by_name[name] for name in order] + [d for d in dirs if d.name not in order]
    return dirs


def _ingest_per_class(root: Path) -> DatasetManifest:
    labels, samples = [], []
    for class_dir in _class_dirs(root):
        labels.append(class_dir.name)
        sample_dirs = sorted(p for p in class_dir.iterdir() if p.is_dir())
        if not sample_dirs:
            logger.warning("class directory %s is empty", class_dir)
        for sd in sample_dirs:
            files = _images(sd)
            if not files:
                logger.warning("sample directory %s has no images", sd)
                continue
            samples.append(Sample(sd.name, class_dir.name, [str(f) for f in files]))
    return DatasetManifest(tuple(labels), samples, f"per-class-dirs ingest of {root}")


# ALL-IDB file names end in _0 (healthy) or _1 (blast present), e.g. Im001_1.jpg
_ALL_IDB = re.compile(r"^(?P<id>Im\d+)_(?P<flag>[01])$", re.IGNORECASE)


def _ingest_all_idb(root: Path) -> DatasetManifest:
    samples = []
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    for f in files:
        m = _ALL_IDB.match(f.stem)
        if not m:
            logger.warning("skipping %s: not an ALL-IDB image name", f)
            continue
        label = "ALL" if m.group("flag") == "1" else "normal"
        samples.append(Sample(m.group("id"), label, [str(f)]))
    return DatasetManifest(("normal", "ALL"), samples, f"all-idb ingest of {root}: one image per sample")


def _ingest_bone_marrow(root: Path) -> DatasetManifest:
    """``root/<diagnosis>/<patient id>/**/*.png``; diagnosis directory names become labels.

    One patient directory is one bag, whatever nesting of field/cell images
    it holds underneath.
    """
    labels, samples = [], []
    for class_dir in _class_dirs(root):
        labels.append(class_dir.name)
        patients = sorted(p for p in class_dir.iterdir() if p.is_dir())
        if not patients:
            logger.warning("class directory %s is empty", class_dir)
        for pd in patients:
            files = sorted(p for p in pd.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            if files:
                samples.append(Sample(pd.name, class_dir.name, [str(f) for f in files]))
    return DatasetManifest(tuple(labels), samples, f"bone-marrow ingest of {root}: one patient per sample")


def ingest_folder(root, convention: str = "per-class-dirs") -> DatasetManifest:
    """Build a manifest from an on-disk dataset layout."""
    root = Path(root)
    if convention not in CONVENTIONS:
        raise ConventionError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    ingest = {"per-class-dirs": _ingest_per_class, "all-idb": _ingest_all_idb,
              "bone-marrow": _ingest_bone_marrow}[convention]
    manifest = ingest(root)
    if not manifest.samples:
        raise ManifestError([f"{root}: no samples found ({convention})"])
    return manifest
