"""Accuracy metrics, per-class forgetting reports and projected-probability analysis."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, UndefinedMetricError
from .tasks import LabelMap, LabeledSet

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = ["schema_version", "seed", "task", "num_seen", "top1_all", "top1_old", "top1_new"]


@torch.no_grad()
def predict(classifier, images: torch.Tensor, columns, batch_size: int = 512) -> torch.Tensor:
    """Column index (into ``columns``) of the argmax logit, eval-mode forward."""
    classifier.eval()
    ref = next(classifier.parameters())
    cols = torch.as_tensor(columns, dtype=torch.long)
    out = []
    for i in range(0, images.shape[0], batch_size):
        logits = classifier(images[i:i + batch_size].to(ref))
        out.append(logits[:, cols].argmax(dim=1))
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def correct_counts(classifier, data: LabeledSet, class_scope, label_map: LabelMap) -> dict:
    """class id -> (correct, total) for argmax over the ``class_scope`` columns."""
    scope = [int(c) for c in class_scope]
    if len(data) == 0:
        raise UndefinedMetricError("empty evaluation set")
    outside = set(data.classes()) - set(scope)
    if outside:
        raise ConfigurationError(f"eval labels {sorted(outside)} are outside the class scope")
    pred_idx = predict(classifier, data.images, label_map.columns(scope))
    pred = torch.as_tensor(scope)[pred_idx]
    hit = pred == data.labels
    counts = {}
    for c in data.classes():
        m = data.labels == c
        counts[c] = (int(hit[m].sum()), int(m.sum()))
    return counts


def top1(classifier, data: LabeledSet, class_scope, label_map: LabelMap) -> float:
    counts = correct_counts(classifier, data, class_scope, label_map)
    return 100.0 * sum(c for c, _ in counts.values()) / sum(n for _, n in counts.values())


def per_class_accuracy(classifier, data: LabeledSet, class_scope, label_map: LabelMap) -> dict:
    counts = correct_counts(classifier, data, class_scope, label_map)
    for c in class_scope:
        if int(c) not in counts:
            log.warning("class %s has no evaluation examples; omitted", c)
    return {c: 100.0 * k / n for c, (k, n) in counts.items()}


@torch.no_grad()
def projected_probabilities(old_classifier, new_images: torch.Tensor, old_columns) -> torch.Tensor:
    """Mean over images of the softmax taken over the old columns only."""
    if new_images.shape[0] == 0:
        raise UndefinedMetricError("no images to project")
    old_classifier.eval()
    ref = next(old_classifier.parameters())
    logits = old_classifier(new_images.to(ref))[:, torch.as_tensor(list(old_columns))]
    return F.softmax(logits, dim=1).mean(dim=0)


@dataclass
class ForgettingReport:
    rows: list  # (class id, before, after, delta), largest drop first
    groups: dict = field(default_factory=dict)  # group name -> mean delta

    def deltas(self) -> dict:
        return {c: d for c, _, _, d in self.rows}

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "before", "after", "delta"])
            for row in self.rows:
                w.writerow([row[0], f"{row[1]:.4f}", f"{row[2]:.4f}", f"{row[3]:.4f}"])
            for g, d in self.groups.items():
                w.writerow([f"group:{g}", "", "", f"{d:.4f}"])
        return path


def forgetting_report(before: dict, after: dict, groups: Optional[dict] = None) -> ForgettingReport:
    """Per-class ``after - before``; ``groups`` maps a group name to its member classes."""
    if set(before) != set(after):
        diff = sorted(set(before) ^ set(after), key=str)
        raise ConfigurationError(f"class sets differ; symmetric difference {diff}")
    rows = [(c, before[c], after[c], after[c] - before[c]) for c in before]
    rows.sort(key=lambda r: (r[3], str(r[0])))
    agg = {}
    for name, members in (groups or {}).items():
        agg[name] = float(np.mean([after[c] - before[c] for c in members]))
    return ForgettingReport(rows, agg)


def unweighted_class_mean(per_class: dict, classes) -> float:
    return float(np.mean([per_class[c] for c in classes]))


@dataclass
class TaskRecord:
    seed: object
    task: int
    num_seen: int
    top1_all: float
    top1_old: Optional[float]
    top1_new: float


def evaluate_task(classifier, seen_eval: LabeledSet, old_classes, new_classes, label_map: LabelMap,
                  seed, task: int):
    """TaskRecord plus per-class accuracies after learning task ``task`` (0-based)."""
    scope = list(old_classes) + list(new_classes)
    counts = correct_counts(classifier, seen_eval, scope, label_map)

    def pct(classes):
        k = sum(counts[c][0] for c in classes if c in counts)
        n = sum(counts[c][1] for c in classes if c in counts)
        return 100.0 * k / n if n else None

    rec = TaskRecord(seed, task + 1, len(scope), pct(scope), pct(old_classes), pct(new_classes))
    per_class = {c: 100.0 * k / n for c, (k, n) in counts.items()}
    return rec, per_class


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)  # (seed, task) -> {class id: accuracy}
    seeds: list = field(default_factory=list)

    def add(self, record: TaskRecord, per_class: Optional[dict] = None):
        self.rows.append(record)
        if record.seed not in self.seeds:
            self.seeds.append(record.seed)
        if per_class is not None:
            self.per_class[(record.seed, record.task)] = dict(per_class)

    def extend(self, other: "MetricsTable"):
        for r in other.rows:
            self.add(r, other.per_class.get((r.seed, r.task)))

    def for_seed(self, seed) -> list:
        return [r for r in self.rows if r.seed == seed]

    def mean_rows(self) -> list:
        tasks = sorted({r.task for r in self.rows})
        out = []
        for t in tasks:
            rs = [r for r in self.rows if r.task == t]

            def m(attr):
                vals = [getattr(r, attr) for r in rs if getattr(r, attr) is not None]
                return float(np.mean(vals)) if vals else None

            out.append(TaskRecord("mean", t, rs[0].num_seen, m("top1_all"), m("top1_old"), m("top1_new")))
        return out

    def to_csv(self, path, rows=None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = self.rows if rows is None else rows
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(METRICS_COLUMNS)
            for r in rows:
                w.writerow([
                    METRICS_SCHEMA_VERSION, r.seed, r.task, r.num_seen,
                    _fmt(r.top1_all), _fmt(r.top1_old), _fmt(r.top1_new),
                ])
        return path

    def to_json(self) -> dict:
        return {
            "schema_version": METRICS_SCHEMA_VERSION,
            "seeds": self.seeds,
            "rows": [r.__dict__ for r in self.rows],
            "mean": [r.__dict__ for r in self.mean_rows()],
            "per_class": [
                {"seed": s, "task": t, "accuracy": {str(c): a for c, a in pc.items()}}
                for (s, t), pc in self.per_class.items()
            ],
        }


def _fmt(x):
    return "" if x is None else f"{x:.4f}"


def read_metrics_csv(path) -> list:
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        rows = list(reader)
    for r in rows:
        if int(r["schema_version"]) != METRICS_SCHEMA_VERSION:
            raise ConfigurationError(f"{path}: unknown metrics schema version {r['schema_version']}")
    return [
        TaskRecord(r["seed"], int(r["task"]), int(r["num_seen"]), float(r["top1_all"]),
                   float(r["top1_old"]) if r["top1_old"] else None, float(r["top1_new"]))
        for r in rows
    ]


def average_improvement(ours: dict, other: dict) -> Optional[float]:
    """Mean of (ours - other) over the incremental tasks (task 2 onward) both report."""
    tasks = sorted(t for t in set(ours) & set(other) if t >= 2)
    if not tasks:
        return None
    return float(np.mean([ours[t] - other[t] for t in tasks]))


def sign_test_pvalue(positives: int, n: int) -> float:
    """One-sided binomial sign-test p-value for ``positives`` successes out of ``n``."""
    return sum(math.comb(n, k) for k in range(positives, n + 1)) / 2 ** n
