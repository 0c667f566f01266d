"""Metrics report: UTF-8 JSON with sorted keys and fixed formatting.

Identical inputs give byte-identical files.  ``REPORT_SCHEMA`` is the
JSON-Schema description of the crossval report; the README shows an
example.  Aggregates carry both the raw numbers and a ``"mean ± std"``
string produced by :func:`leukomil.metrics.format_mean_std`.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..metrics import Aggregate, ConfusionMatrix

REPORT_VERSION = 1

_AGG = {
    "type": "object",
    "required": ["mean", "std", "text"],
    "properties": {"mean": {"type": "number"}, "std": {"type": "number"}, "text": {"type": "string"}},
}
_CONFUSION = {
    "type": "object",
    "required": ["classes", "counts"],
    "properties": {
        "classes": {"type": "array", "items": {"type": "string"}},
        "counts": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
    },
}
_AUC_MAP = {"type": "object", "additionalProperties": {"type": ["number", "null"]}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["report_version", "tool", "config", "classes", "k", "folds", "aggregate", "pooled_confusion"],
    "properties": {
        "report_version": {"const": REPORT_VERSION},
        "tool": {"type": "object", "required": ["name", "version"]},
        "config": {"type": "object"},
        "classes": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "k": {"type": "integer", "minimum": 2},
        "folds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["fold", "train_ids", "test_ids", "accuracy", "auc", "confusion",
                             "epochs_run", "stopping_reason", "predictions"],
                "properties": {
                    "fold": {"type": "integer", "minimum": 0},
                    "train_ids": {"type": "array", "items": {"type": "string"}},
                    "test_ids": {"type": "array", "items": {"type": "string"}},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "auc": _AUC_MAP,
                    "confusion": _CONFUSION,
                    "epochs_run": {"type": "integer", "minimum": 0},
                    "stopping_reason": {"enum": ["max_epochs", "early_stopping"]},
                    "predictions": {"type": "array"},
                    "cell_auc": _AUC_MAP,
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["accuracy", "auc"],
            "properties": {
                "accuracy": _AGG,
                "auc": {"type": "object", "additionalProperties": _AGG},
                "cell_auc": {"type": "object", "additionalProperties": _AGG},
            },
        },
        "pooled_confusion": _CONFUSION,
    },
}


def aggregate_entry(agg: Aggregate) -> dict:
    return {"mean": agg.mean, "std": agg.std, "text": str(agg)}


def confusion_entry(cm: ConfusionMatrix) -> dict:
    return {"classes": list(cm.classes), "counts": cm.counts.tolist()}


def _plain(obj):
    """Convert numpy scalars/arrays and tuples into JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        return v
    return obj


def dumps_report(metrics: dict) -> str:
    return json.dumps(_plain(metrics), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_report(metrics: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_report(metrics))


def read_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
