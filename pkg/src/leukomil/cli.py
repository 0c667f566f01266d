"""Command-line entry point: ``leukomil <command> ...``.

Commands: synth, segment, train, crossval, predict, score-cells, pca.
Errors go to stderr as a single ``error: <Kind>: <message>`` line with a
nonzero exit status (2 when segmentation finds no cells, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .dataio.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataio.manifest import (
    CellAnnotation,
    CellAnnotationSet,
    ConventionError,
    IMAGE_SUFFIXES,
    ManifestError,
    load_cells,
    load_manifest,
)
from .dataio.report import confusion_entry, dumps_report, write_report
from .experiment import (
    cell_inputs,
    config_snapshot,
    crossval,
    ingest_fields,
    load_bags,
    load_run_config,
    run_config_from_dict,
    segment_dataset,
    write_synthetic,
)
from .metrics import DegenerateDataError, MetricError, SplitError, confusion, one_vs_rest, pca_project, silhouette
from .model import ConfigError
from .training import DatasetError, predict_sample, score_cells_with_tta, stream, train

logger = logging.getLogger("leukomil")

EXIT_ERROR = 1
EXIT_NO_CELLS = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR, kind: str = "CliError"):
        super().__init__(message)
        self.code = code
        self.kind = kind


# ---------------------------------------------------------------------------
# helpers


def _run_config(args, extra: dict | None = None, params=None):
    """Config file plus flag overrides; a checkpoint's stored config is the base when given."""
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "tta_replicas", None) is not None:
        overrides.setdefault("train", {})["tta_replicas"] = args.tta_replicas
    if getattr(args, "k", None) is not None:
        overrides.setdefault("metrics", {})["k"] = args.k
    for block, values in (extra or {}).items():
        overrides.setdefault(block, {}).update(values)
    stored = params.metadata.get("run_config") if params is not None else None
    base = run_config_from_dict(stored) if stored is not None else None
    return load_run_config(args.config, overrides, base)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(data), encoding="utf-8")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_roc_csv(path: Path, roc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow([_fmt(t), _fmt(f), _fmt(p)])


_PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")


def write_scatter_svg(path: Path, coords: np.ndarray, labels: list[str], title: str = "") -> None:
    """Minimal 2-D scatter, one colour per label, with a legend."""
    size, pad = 480, 40
    xs, ys = coords[:, 0], coords[:, 1]

    def scale(v, lo, hi):
        return (v - lo) / (hi - lo) if hi > lo else np.full_like(v, 0.5)

    px = pad + scale(xs, xs.min(), xs.max()) * (size - 2 * pad)
    py = size - pad - scale(ys, ys.min(), ys.max()) * (size - 2 * pad)
    uniq = list(dict.fromkeys(labels))
    colour = {lab: _PALETTE[i % len(_PALETTE)] for i, lab in enumerate(uniq)}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 140}" height="{size}" '
             f'viewBox="0 0 {size + 140} {size}">',
             f'<rect width="{size + 140}" height="{size}" fill="white"/>',
             f'<text x="{pad}" y="{pad / 2:.0f}" font-size="13" font-family="sans-serif">{title}</text>',
             f'<text x="{size / 2:.0f}" y="{size - 8}" font-size="12" font-family="sans-serif">PC1</text>',
             f'<text x="10" y="{size / 2:.0f}" font-size="12" font-family="sans-serif">PC2</text>']
    for x, y, lab in zip(px, py, labels):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colour[lab]}" fill-opacity="0.7"/>')
    for i, lab in enumerate(uniq):
        y = pad + 18 * i
        parts.append(f'<circle cx="{size + 10}" cy="{y}" r="5" fill="{colour[lab]}"/>')
        parts.append(f'<text x="{size + 20}" y="{y + 4}" font-size="12" font-family="sans-serif">{lab}</text>')
    parts.append("</svg>")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def _load_cell_set(args) -> CellAnnotationSet:
    if getattr(args, "cells", None):
        return load_cells(args.cells)
    root = Path(args.patches)
    if not root.is_dir():
        raise CliError(f"patch directory {root} does not exist", kind="FileNotFoundError")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    return CellAnnotationSet((), [CellAnnotation(str(p), "") for p in files])


def _item_id(path: str, root: Path) -> str:
    try:
        return Path(path).relative_to(root).as_posix()
    except ValueError:
        return Path(path).as_posix()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.witness_fraction is not None:
        extra["witness_fraction"] = args.witness_fraction
    if args.samples_per_class is not None:
        extra["samples_per_class"] = args.samples_per_class
    rc = _run_config(argparse.Namespace(config=args.config), {"synthetic": extra} if extra else None)
    counts = write_synthetic(rc.synthetic, args.out, rc.segmentation if args.patches else None)
    _write_json(Path(args.out) / "run_config.json", config_snapshot(rc))
    print(json.dumps(counts, sort_keys=True))
    return 0


def cmd_segment(args) -> int:
    rc = _run_config(args)
    fields = ingest_fields(args.input)
    out = Path(args.out)

    def report(path, n):
        print(f"{Path(path).as_posix()}\t{n}")

    manifest = segment_dataset(fields, out, rc.segmentation, jobs=args.jobs, report=report)
    total = sum(len(s.patches) for s in manifest.samples)
    if total == 0:
        raise CliError("no cells segmented", EXIT_NO_CELLS, "NoCellsError")
    _write_json(out / "run_config.json", config_snapshot(rc))
    print(f"total\t{total}")
    return 0


def _check_classes(manifest):
    counts = manifest.label_counts()
    missing = [lab for lab, n in counts.items() if n == 0]
    if missing:
        raise ConfigError(f"manifest declares classes with no samples: {missing}")
    if len(counts) < 2:
        raise ConfigError("training needs at least two classes")


def cmd_train(args) -> int:
    rc = _run_config(args)
    manifest = load_manifest(args.manifest)
    _check_classes(manifest)
    bags = load_bags(manifest, rc.backbone.input_side)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(json.dumps({"config": config_snapshot(rc)}, sort_keys=True) + "\n")

        def on_epoch(e):
            log.write(json.dumps({"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss,
                                  "val_accuracy": e.val_accuracy}, sort_keys=True) + "\n")
            log.flush()

        model = train(bags, manifest.labels, rc.train, rc.backbone, rc.augment, rc.model.head_widths, on_epoch)
        log.write(json.dumps({"stopping_reason": model.stopping_reason, "best_epoch": model.best_epoch},
                             sort_keys=True) + "\n")
    save_checkpoint(model, out, extra={**model.metadata(), "run_config": config_snapshot(rc),
                                       "seed": rc.train.seed})
    print(f"{model.stopping_reason}\t{len(model.history)} epochs\tbest {model.best_epoch}")
    return 0


def cmd_crossval(args) -> int:
    rc = _run_config(args)
    manifest = load_manifest(args.manifest)
    _check_classes(manifest)
    bags = load_bags(manifest, rc.backbone.input_side)
    cells = None
    if args.cells:
        cells = cell_inputs(load_cells(args.cells), rc.backbone.input_side)
    out = Path(args.out)
    report, results = crossval(bags, manifest.labels, rc, rc.metrics.k, cells, jobs=args.jobs,
                               checkpoint_dir=out)
    write_report(report, out / "report.json")
    classes = manifest.labels
    truth = [p["label"] for f in report["folds"] for p in f["predictions"]]
    probs = np.array([[p["probabilities"][c] for c in classes] for f in report["folds"] for p in f["predictions"]])
    for c, roc in one_vs_rest(probs, truth, classes).items():
        write_roc_csv(out / f"roc_sample_{c}.csv", roc)
    if cells is not None:
        cell_truth = [t for r in results if r.cell_truth for t in r.cell_truth]
        if cell_truth:
            cell_probs = np.concatenate([r.cell_probabilities for r in results if r.cell_truth])
            for c, roc in one_vs_rest(cell_probs, cell_truth, classes).items():
                write_roc_csv(out / f"roc_cell_{c}.csv", roc)
    agg = report["aggregate"]
    print(f"accuracy\t{agg['accuracy']['text']}")
    for c, a in agg["auc"].items():
        print(f"auc[{c}]\t{a['text']}")
    for c, a in agg.get("cell_auc", {}).items():
        print(f"cell_auc[{c}]\t{a['text']}")
    return 0


def cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    rc = _run_config(args, params=params)
    manifest = load_manifest(args.manifest)
    if set(manifest.labels) - set(params.classes):
        raise ConfigError(f"label space mismatch: manifest {list(manifest.labels)} vs "
                          f"checkpoint {list(params.classes)}")
    bags = load_bags(manifest, params.backbone.input_side)
    replicas = rc.train.tta_replicas if args.tta_replicas is None else args.tta_replicas
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample", *params.classes, "predicted"])
        for b in bags:
            if len(b.inputs) == 0:
                logger.warning("sample %s has no patches; skipped", b.sample_id)
                continue
            probs = predict_sample(params, b, replicas, stream(rc.train.seed, "tta", b.sample_id), rc.augment)
            w.writerow([b.sample_id, *(_fmt(p) for p in probs), params.classes[int(np.argmax(probs))]])
    _write_json(out.with_name(out.name + ".config.json"), config_snapshot(rc))
    return 0


def cmd_score_cells(args) -> int:
    params = load_checkpoint(args.checkpoint)
    rc = _run_config(args, params=params)
    cells = _load_cell_set(args)
    if len(cells) == 0:
        raise CliError("no cell patches found", kind="EmptyInputError")
    root = Path(args.cells).parent if args.cells else Path(args.patches)
    inputs, _, types = cell_inputs(cells, params.backbone.input_side)
    replicas = 0 if args.tta_replicas is None else args.tta_replicas
    probs = score_cells_with_tta(params, inputs, replicas, stream(rc.train.seed, "cells"), rc.augment)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cmap = rc.metrics.cell_class_map
    annotated = bool(args.cells)
    with open(out / "cell_scores.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["patch", *params.classes, "predicted"] + (["cell_type"] if annotated else []))
        for c, p, t in zip(cells.cells, probs, types):
            row = [_item_id(c.patch, root), *(_fmt(v) for v in p), params.classes[int(np.argmax(p))]]
            w.writerow(row + ([t] if annotated else []))
    result = {"config": config_snapshot(rc), "cells": len(cells)}
    if annotated:
        keep = [i for i, t in enumerate(types) if cmap.get(t) in params.classes]
        truth = [cmap[types[i]] for i in keep]
        rocs = one_vs_rest(probs[keep], truth, params.classes)
        for cls, roc in rocs.items():
            write_roc_csv(out / f"roc_cell_{cls}.csv", roc)
        preds = [params.classes[int(np.argmax(probs[i]))] for i in keep]
        result["metrics"] = {
            "auc": {c: (rocs[c].auc if c in rocs else None) for c in params.classes},
            "confusion": confusion_entry(confusion(preds, truth, params.classes)),
        }
        for c, roc in rocs.items():
            print(f"cell_auc[{c}]\t{roc.auc:.4f}")
    _write_json(out / "cell_metrics.json", result)
    return 0


def cmd_pca(args) -> int:
    from .model import embed_inputs_batched

    params = load_checkpoint(args.checkpoint)
    rc = _run_config(args, params=params)
    cells = load_cells(args.cells)
    if args.limit:
        cells = CellAnnotationSet(cells.cell_types, cells.cells[:args.limit])
    if len(cells) < 3:
        raise DegenerateDataError(f"PCA needs at least 3 annotated patches, got {len(cells)}")
    inputs, _, types = cell_inputs(cells, params.backbone.input_side)
    emb = embed_inputs_batched(inputs, params, args.layer)
    proj = pca_project(emb, 2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(args.cells).parent
    with open(out / f"pca_{args.layer}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "pc1", "pc2", "label"])
        for c, (x, y), t in zip(cells.cells, proj.coords, types):
            w.writerow([_item_id(c.patch, root), _fmt(x), _fmt(y), t])
    write_scatter_svg(out / f"pca_{args.layer}.svg", proj.coords, types, f"PCA of {args.layer} features")
    sil = silhouette(proj.coords, types) if len(set(types)) > 1 else None
    _write_json(out / f"pca_{args.layer}.json", {
        "config": config_snapshot(rc), "layer": args.layer, "items": len(cells),
        "explained_variance_ratio": proj.explained_variance_ratio.tolist(), "silhouette": sil,
    })
    if sil is not None:
        print(f"silhouette\t{sil:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leukomil", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"leukomil {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, jobs=False):
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--out", required=True, help="output path")
        if seed:
            sp.add_argument("--seed", type=int)
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = sub.add_parser("synth", help="render a synthetic corpus")
    common(sp)
    sp.add_argument("--witness-fraction", type=float)
    sp.add_argument("--samples-per-class", type=int)
    sp.add_argument("--patches", action="store_true", help="also segment fields into a patch store")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("segment", help="segment field images into cell patches")
    common(sp, seed=False, jobs=True)
    sp.add_argument("input", help="root of <label>/<sample>/<field image> folders")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("train", help="train on a manifest (always from scratch)")
    common(sp)
    sp.add_argument("manifest")
    sp.add_argument("--log", help="epoch log path (default: <out>.log.jsonl)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    common(sp, jobs=True)
    sp.add_argument("manifest")
    sp.add_argument("--k", type=int)
    sp.add_argument("--tta-replicas", type=int)
    sp.add_argument("--cells", help="cell annotations for cell-level AUC on held-out samples")
    sp.set_defaults(func=cmd_crossval)

    sp = sub.add_parser("predict", help="per-sample probabilities")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("manifest")
    sp.add_argument("--tta-replicas", type=int, help="0 disables test-time augmentation")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("score-cells", help="per-cell scores, with ROC when annotated")
    common(sp)
    sp.add_argument("checkpoint")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--cells", help="cell annotation file")
    src.add_argument("--patches", help="directory of patch images")
    sp.add_argument("--tta-replicas", type=int, help="default 0 (no augmentation)")
    sp.set_defaults(func=cmd_score_cells)

    sp = sub.add_parser("pca", help="2-D PCA of cell embeddings")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--cells", required=True)
    sp.add_argument("--layer", choices=("conv", "fc1"), default="conv")
    sp.add_argument("--limit", type=int, help="use only the first N annotated cells")
    sp.set_defaults(func=cmd_pca)
    return p


_KNOWN_ERRORS = (CliError, ConfigError, ManifestError, ConventionError, CheckpointError, DatasetError,
                 SplitError, MetricError, DegenerateDataError, T.TrainingError, T.EmptyBagError,
                 FileNotFoundError, ValueError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        kind = exc.kind if isinstance(exc, CliError) else type(exc).__name__
        code = exc.code if isinstance(exc, CliError) else EXIT_ERROR
        message = " ".join(str(exc).split())
        print(f"error: {kind}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
