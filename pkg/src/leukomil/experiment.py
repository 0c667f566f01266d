"""Run configuration and the end-to-end pipeline steps used by the CLI.

A run config is a JSON object with optional blocks ``segmentation``,
``augment``, ``backbone``, ``model``, ``train``, ``metrics`` and
``synthetic``.  Every field is optional; unknown blocks or keys are
rejected.  See the README for the defaults.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .augment import AugmentConfig
from .dataio.checkpoint import save_checkpoint
from .dataio.manifest import (
    CellAnnotation,
    CellAnnotationSet,
    DatasetManifest,
    Sample,
    ingest_folder,
    load_patch,
    read_image,
    write_cells,
    write_image,
    write_manifest,
)
from .dataio.report import REPORT_VERSION, aggregate_entry, confusion_entry
from .dataio.synthetic import CELL_TYPES, SyntheticConfig, generate_synthetic
from .imaging import SegmentationParams, crop_patch, segment_field
from .metrics import MetricError, aggregate_cv, confusion, kfold, one_vs_rest
from .model import BackboneConfig, ConfigError, ModelParams, prepare
from .training import (
    PreparedBag,
    TrainConfig,
    TrainedModel,
    predict_sample,
    prepare_samples,
    score_cells_with_tta,
    stream,
    train,
)

logger = logging.getLogger(__name__)

# synthetic cell types map onto the sample class they witness
DEFAULT_CELL_CLASS_MAP = {"normal": "normal", "lymphoblast": "ALL", "myeloblast": "AML"}


@dataclass(frozen=True)
class ModelOptions:
    head_widths: tuple[int, ...] = (256, 64)


@dataclass(frozen=True)
class MetricsOptions:
    k: int = 3
    cell_class_map: dict = field(default_factory=lambda: dict(DEFAULT_CELL_CLASS_MAP))

    def __hash__(self):
        return hash((self.k, tuple(sorted(self.cell_class_map.items()))))


@dataclass(frozen=True)
class RunConfig:
    segmentation: SegmentationParams = SegmentationParams()
    augment: AugmentConfig = AugmentConfig()
    backbone: BackboneConfig = BackboneConfig()
    model: ModelOptions = ModelOptions()
    train: TrainConfig = TrainConfig()
    metrics: MetricsOptions = field(default_factory=MetricsOptions)
    synthetic: SyntheticConfig = SyntheticConfig()


_BLOCKS = {
    "segmentation": SegmentationParams,
    "augment": AugmentConfig,
    "backbone": BackboneConfig,
    "model": ModelOptions,
    "train": TrainConfig,
    "metrics": MetricsOptions,
    "synthetic": SyntheticConfig,
}


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build_block(name: str, cls, values: dict, base):
    if not isinstance(values, dict):
        raise ConfigError(f"config block {name!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in config block {name!r}; known: {sorted(known)}")
    current = getattr(base, name)
    kwargs = {k: _coerce(v, getattr(current, k)) for k, v in values.items()}
    try:
        return dataclasses.replace(current, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config block {name!r}: {exc}") from None


def run_config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(_BLOCKS))
    if unknown:
        raise ConfigError(f"unknown config block(s) {unknown}; known: {sorted(_BLOCKS)}")
    blocks = {name: _build_block(name, cls, data[name], base) for name, cls in _BLOCKS.items() if name in data}
    return dataclasses.replace(base, **blocks)


def load_run_config(path=None, overrides: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    """Read a config file over ``base`` (or defaults), then apply ``{block: {key: value}}`` overrides."""
    rc = base or RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
        rc = run_config_from_dict(data, rc)
    if overrides:
        rc = run_config_from_dict(overrides, rc)
    return rc


def config_snapshot(rc: RunConfig) -> dict:
    return {name: asdict(getattr(rc, name)) for name in _BLOCKS}


def fold_seed(seed: int, fold: int) -> int:
    """64-bit training seed for one cross-validation fold."""
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32 & 0xFFFFFFFF, fold])
    lo, hi = state.generate_state(2, np.uint32)
    return int(lo) | int(hi) << 32


# ---------------------------------------------------------------------------
# synth


def write_synthetic(cfg: SyntheticConfig, out_dir, segmentation: SegmentationParams | None = None) -> dict:
    """Render a synthetic corpus to disk.

    Layout::

        fields/labels.txt                       class order
        fields/<label>/<sample_id>/<field>.png  full fields
        cells/<sample_id>/<field>_<nnn>.png     crops centred on every glyph
        cells.jsonl                             cell annotations (true type and centre)
        truth.json                              config and per-field glyph records
        manifest.jsonl, patches/...             only when ``segmentation`` is given
    """
    out = Path(out_dir)
    ds = generate_synthetic(cfg)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    (out / "fields" / "labels.txt").write_text("\n".join(ds.labels) + "\n", encoding="utf-8")
    cells, truth = [], []
    samples = []
    for s in ds.samples:
        patches, fields, centroids = [], [], []
        for f in s.fields:
            write_image(out / "fields" / s.label / s.sample_id / f"{f.field_id}.png", f.image)
            truth.append({
                "sample": s.sample_id, "label": s.label, "field": f.field_id,
                "glyphs": [{"center": list(g.center), "cell_type": g.cell_type, "radius": g.radius}
                           for g in f.glyphs],
            })
            for i, g in enumerate(f.glyphs):
                path = out / "cells" / s.sample_id / f"{f.field_id}_{i:03d}.png"
                write_image(path, crop_patch(f.image, g.center).pixels)
                cells.append(CellAnnotation(str(path), g.cell_type, s.sample_id, g.center))
            if segmentation is not None:
                for j, p in enumerate(segment_field(f.image, segmentation, s.sample_id)):
                    path = out / "patches" / s.sample_id / f"{f.field_id}_{j:03d}.png"
                    write_image(path, p.pixels)
                    patches.append(str(path))
                    fields.append(f.field_id)
                    centroids.append(p.centroid)
        samples.append(Sample(s.sample_id, s.label, patches, fields, centroids))
    write_cells(CellAnnotationSet(CELL_TYPES, cells), out / "cells.jsonl")
    (out / "truth.json").write_text(
        json.dumps({"config": asdict(cfg), "fields": truth}, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if segmentation is not None:
        write_manifest(DatasetManifest(ds.labels, samples, "synthetic corpus, segmented"), out / "manifest.jsonl")
    return {"samples": len(ds.samples), "fields": len(truth), "glyphs": ds.glyph_count(),
            "cells": len(cells)}


# ---------------------------------------------------------------------------
# segment


def _segment_one(args):
    path, params, source_id = args
    return [(p.pixels, p.centroid) for p in segment_field(read_image(path), params, source_id)]


def segment_dataset(fields: DatasetManifest, out_dir, params: SegmentationParams, jobs: int = 1,
                    report=None) -> DatasetManifest:
    """Segment every field image of ``fields`` and write a patch store plus manifest.

    ``fields`` lists field images as the patches of each sample (as produced
    by :func:`ingest_folder`).  ``report(path, count)`` is called per field in
    input order.
    """
    out = Path(out_dir)
    jobs_list = [(p, params, s.sample_id) for s in fields.samples for p in s.patches]
    results = _map(_segment_one, jobs_list, jobs)
    samples = []
    it = iter(results)
    for s in fields.samples:
        patches, field_ids, centroids = [], [], []
        for fpath in s.patches:
            found = next(it)
            if report is not None:
                report(fpath, len(found))
            stem = Path(fpath).stem
            for j, (pixels, centroid) in enumerate(found):
                path = out / "patches" / s.sample_id / f"{stem}_{j:03d}.png"
                write_image(path, pixels)
                patches.append(str(path))
                field_ids.append(stem)
                centroids.append(centroid)
        if patches:
            samples.append(Sample(s.sample_id, s.label, patches, field_ids, centroids))
        else:
            logger.warning("sample %s: no cells segmented", s.sample_id)
    manifest = DatasetManifest(fields.labels, samples, "segmented patches")
    if samples:
        write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def _map(fn, items, jobs: int):
    """``map`` over a process pool when ``jobs > 1``; results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# crossval


def load_bags(manifest: DatasetManifest, side: int) -> list[PreparedBag]:
    return prepare_samples(manifest.samples, side)


def cell_inputs(cells: CellAnnotationSet, side: int) -> tuple[np.ndarray, list[str], list[str]]:
    """Prepared inputs, sample ids and cell types of an annotation set."""
    arrs = [prepare(load_patch(c.patch), side) for c in cells.cells]
    stack = np.stack(arrs) if arrs else np.zeros((0, side, side, 3), np.uint8)
    return stack, [c.sample_id for c in cells.cells], [c.cell_type for c in cells.cells]


def _auc_map(probs, truth, classes) -> dict:
    rocs = one_vs_rest(probs, truth, classes) if len(truth) else {}
    return {c: (rocs[c].auc if c in rocs else None) for c in classes}


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    model: TrainedModel
    probabilities: np.ndarray  # [n_test, C]
    cell_probabilities: np.ndarray | None = None
    cell_truth: list[str] | None = None


def _run_fold(args) -> FoldResult:
    fold, train_bags, test_bags, cells, rc, classes, seed = args
    fseed = fold_seed(seed, fold)
    tcfg = dataclasses.replace(rc.train, seed=fseed)
    model = train(train_bags, classes, tcfg, rc.backbone, rc.augment, rc.model.head_widths)
    probs = np.stack([
        predict_sample(model.params, b, tcfg.tta_replicas, stream(fseed, "tta", b.sample_id), rc.augment)
        for b in test_bags
    ]) if test_bags else np.zeros((0, len(classes)), np.float32)
    result = FoldResult(fold, [b.sample_id for b in train_bags], [b.sample_id for b in test_bags], model, probs)
    if cells is not None and len(cells[0]):
        inputs, truth = cells
        result.cell_probabilities = score_cells_with_tta(model.params, inputs, tcfg.tta_replicas,
                                                         stream(fseed, "cells"), rc.augment)
        result.cell_truth = truth
    return result


def crossval(bags: Sequence[PreparedBag], classes: Sequence[str], rc: RunConfig, k: int | None = None,
             cells: tuple[np.ndarray, list[str], list[str]] | None = None, jobs: int = 1,
             checkpoint_dir=None) -> tuple[dict, list[FoldResult]]:
    """Stratified k-fold training and TTA evaluation; returns (report dict, fold results).

    ``cells`` is ``(inputs, sample ids, cell types)``; each fold scores the
    cells of its held-out samples, with cell types mapped to classes through
    ``rc.metrics.cell_class_map``.
    """
    classes = tuple(classes)
    k = k or rc.metrics.k
    bags = [b for b in bags if len(b.inputs)]
    seed = rc.train.seed
    split = kfold([b.sample_id for b in bags], [b.label for b in bags], k, seed)
    cmap = rc.metrics.cell_class_map
    tasks = []
    for fold in range(k):
        train_ids, test_ids = split.train_test(fold)
        test_set = set(test_ids)
        train_bags = [b for b in bags if b.sample_id not in test_set]
        test_bags = [b for b in bags if b.sample_id in test_set]
        fold_cells = None
        if cells is not None:
            inputs, sids, types = cells
            idx = [i for i, sid in enumerate(sids) if sid in test_set and cmap.get(types[i]) in classes]
            fold_cells = (inputs[idx], [cmap[types[i]] for i in idx])
        tasks.append((fold, train_bags, test_bags, fold_cells, rc, classes, seed))
    results = _map(_run_fold, tasks, jobs)

    if checkpoint_dir is not None:
        for r in results:
            save_checkpoint(r.model, Path(checkpoint_dir) / f"fold{r.fold}.ckpt",
                            extra={**r.model.metadata(), "fold": r.fold, "run_config": config_snapshot(rc)})
    return build_report(results, bags, classes, rc, k), results


def build_report(results: Sequence[FoldResult], bags: Sequence[PreparedBag], classes, rc: RunConfig,
                 k: int) -> dict:
    labels = {b.sample_id: b.label for b in bags}
    folds, accs = [], []
    aucs = {c: [] for c in classes}
    cell_aucs = {c: [] for c in classes}
    pooled = None
    for r in results:
        truth = [labels[s] for s in r.test_ids]
        preds = [classes[int(np.argmax(p))] for p in r.probabilities]
        cm = confusion(preds, truth, classes)
        pooled = cm if pooled is None else pooled + cm
        fold_auc = _auc_map(r.probabilities, truth, classes)
        entry = {
            "fold": r.fold,
            "train_ids": r.train_ids,
            "test_ids": r.test_ids,
            "accuracy": cm.accuracy,
            "auc": fold_auc,
            "confusion": confusion_entry(cm),
            "epochs_run": len(r.model.history),
            "best_epoch": r.model.best_epoch,
            "stopping_reason": r.model.stopping_reason,
            "predictions": [
                {"sample": s, "label": t, "predicted": p,
                 "probabilities": {c: float(v) for c, v in zip(classes, prob)}}
                for s, t, p, prob in zip(r.test_ids, truth, preds, r.probabilities)
            ],
        }
        accs.append(cm.accuracy)
        for c, v in fold_auc.items():
            if v is not None:
                aucs[c].append(v)
        if r.cell_probabilities is not None:
            fold_cell = _auc_map(r.cell_probabilities, r.cell_truth, classes)
            entry["cell_auc"] = fold_cell
            entry["cell_count"] = len(r.cell_truth)
            for c, v in fold_cell.items():
                if v is not None:
                    cell_aucs[c].append(v)
        folds.append(entry)

    def agg_map(values):
        out = {}
        for c, vals in values.items():
            try:
                out[c] = aggregate_entry(aggregate_cv(vals))
            except MetricError:
                continue
        return out

    aggregate = {"accuracy": aggregate_entry(aggregate_cv(accs)), "auc": agg_map(aucs)}
    if any(cell_aucs.values()):
        aggregate["cell_auc"] = agg_map(cell_aucs)
    return {
        "report_version": REPORT_VERSION,
        "tool": {"name": "leukomil", "version": __version__},
        "config": config_snapshot(rc),
        "classes": list(classes),
        "k": k,
        "folds": folds,
        "aggregate": aggregate,
        "pooled_confusion": confusion_entry(pooled),
    }


def evaluate_fold_checkpoint(params: ModelParams, test_bags: Sequence[PreparedBag], rc: RunConfig,
                             fold: int) -> np.ndarray:
    """Re-run a fold's test evaluation from saved parameters (same streams as :func:`crossval`)."""
    fseed = fold_seed(rc.train.seed, fold)
    return np.stack([
        predict_sample(params, b, rc.train.tta_replicas, stream(fseed, "tta", b.sample_id), rc.augment)
        for b in test_bags
    ])


def ingest_fields(root) -> DatasetManifest:
    return ingest_folder(root, "per-class-dirs")
