"""Result tables, per-class accuracy matrices and their on-disk form."""

import csv
import io
import json
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from ..errors import ContractError

__all__ = ["ABSENT", "MetricsTable", "AccuracyMatrix", "per_class_accuracy_matrix",
           "accuracy", "write_table"]

ABSENT = "absent"


def accuracy(pred, labels):
    """Exact fraction correct; ``None`` for an empty set."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if labels.size == 0:
        return None
    return int(np.sum(pred == labels)) / labels.size


@dataclass
class MetricsTable:
    """Rectangular table: one dict per row, all rows with the same keys."""

    experiment: str
    columns: tuple
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, **row):
        if set(row) != set(self.columns):
            missing = set(self.columns) - set(row)
            extra = set(row) - set(self.columns)
            raise ContractError(f"row keys differ from columns (missing {missing}, extra {extra})")
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def where(self, **match):
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(r[c]) for c in self.columns])
        return buf.getvalue()

    def to_jsonl(self):
        return "".join(json.dumps({c: _plain(r[c]) for c in self.columns}) + "\n"
                       for r in self.rows)


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _cell(v):
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class AccuracyMatrix:
    """``b x K`` accuracies; ``present`` is False where a class had no test data."""

    family: str
    correct: np.ndarray
    total: np.ndarray

    @property
    def present(self):
        return self.total > 0

    @property
    def values(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.present, self.correct / np.maximum(self.total, 1), np.nan)

    def entry(self, i, j):
        return float(self.correct[i, j] / self.total[i, j]) if self.total[i, j] else ABSENT

    def rows_identical(self):
        v = self.values
        return bool(np.all((v == v[0]) | np.isnan(v)))

    def records(self):
        b, k = self.correct.shape
        return [{"family": self.family, "client": i, "class": j, "accuracy": self.entry(i, j),
                 "n": int(self.total[i, j])} for i in range(b) for j in range(k)]


def per_class_accuracy_matrix(family, predictions, labels, num_classes):
    """``predictions[i]`` holds client ``i``'s predicted classes on the shared
    test labels ``labels`` (or a per-client label array when a list is given)."""
    rows_c, rows_t = [], []
    for i, pred in enumerate(predictions):
        y = np.asarray(labels[i] if isinstance(labels, (list, tuple)) else labels)
        pred = np.asarray(pred)
        if pred.shape != y.shape:
            raise ContractError("predictions and labels differ in length")
        rows_t.append(np.bincount(y, minlength=num_classes))
        rows_c.append(np.bincount(y[pred == y], minlength=num_classes))
    return AccuracyMatrix(family, np.array(rows_c), np.array(rows_t))


def write_table(table, out_dir, config_hash, config=None, seed=None):
    """Write ``<id>-<hash>.csv``, ``.jsonl`` and ``-manifest.json``; never overwrite."""
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"{table.experiment}-{config_hash[:12]}")
    paths = {"csv": stem + ".csv", "jsonl": stem + ".jsonl", "manifest": stem + "-manifest.json"}
    for p in paths.values():
        if os.path.exists(p):
            raise FileExistsError(f"refusing to overwrite {p}")
    manifest = {
        "experiment": table.experiment,
        "config_hash": config_hash,
        "seed": seed,
        "config": config,
        "metadata": {k: _plain(v) for k, v in table.metadata.items()},
        "columns": list(table.columns),
        "rows": len(table.rows),
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "files": {k: os.path.basename(v) for k, v in paths.items() if k != "manifest"},
    }
    with open(paths["csv"], "x") as fh:
        fh.write(table.to_csv())
    with open(paths["jsonl"], "x") as fh:
        fh.write(table.to_jsonl())
    with open(paths["manifest"], "x") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
