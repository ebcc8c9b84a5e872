"""Downstream evaluation: a single-layer softmax probe on frozen embeddings
and ranked average-precision metrics.

mAP averages per-class AP (every class equal weight); mAP* ranks each
validation sample once by its predicted-class score (every sample equal
weight). Top-1 accuracy is reported alongside for transparency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .hierarchy import ImageRecord, feature_matrix
from .numerics import AdamState, EncoderModel, adam_step


@dataclass(frozen=True)
class ProbeConfig:
    num_classes: int
    batch_size: int = 64
    epochs: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    map_star_mode: str = "pooled"  # or "weighted": class APs weighted by frequency

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.map_star_mode not in ("pooled", "weighted"):
            raise ValueError(f"unknown map_star_mode {self.map_star_mode!r}")


@dataclass
class LinearProbe:
    weights: np.ndarray  # (d_out, C)
    bias: np.ndarray  # (C,)

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        logits = embeddings @ self.weights + self.bias
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class ProbeReport:
    model_name: str
    per_class_ap: list[float | None]
    map_score: float
    map_star: float
    top1_accuracy: float
    n_val: int
    class_counts: list[int]
    class_names: list[str]

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "mAP": self.map_score,
            "mAP_star": self.map_star,
            "per_class": {
                name: ap for name, ap in zip(self.class_names, self.per_class_ap)
            },
            "top1_accuracy": self.top1_accuracy,
            "n_val": self.n_val,
            "class_counts": dict(zip(self.class_names, self.class_counts)),
        }


def _labeled(records: dict[str, ImageRecord], split: str) -> tuple[list[str], np.ndarray]:
    ids = sorted(
        i for i, r in records.items() if r.split == split and r.probe_label is not None
    )
    labels = np.array([records[i].probe_label for i in ids], dtype=np.int64)
    return ids, labels


def train_probe(
    model: EncoderModel,
    records: dict[str, ImageRecord],
    config: ProbeConfig,
) -> LinearProbe:
    """Cross-entropy training of one linear layer on frozen embeddings."""
    config.validate()
    ids, labels = _labeled(records, "probe_train")
    if not ids:
        raise ValueError("no probe_train records with labels")
    missing = sorted(set(range(config.num_classes)) - set(labels.tolist()))
    if missing:
        raise ValueError(f"classes absent from probe_train: {missing}")

    E = model.encode(feature_matrix(records, ids))
    n, d = E.shape
    C = config.num_classes
    probe = LinearProbe(weights=np.zeros((d, C)), bias=np.zeros(C))
    params = {"w": probe.weights, "b": probe.bias}
    adam = AdamState(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    onehot = np.eye(C)[labels]

    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            take = order[start : start + config.batch_size]
            probs = probe.scores(E[take])
            delta = (probs - onehot[take]) / len(take)
            grads = {"w": E[take].T @ delta, "b": delta.sum(axis=0)}
            adam_step(adam, params, grads)
    return probe


def binary_average_precision(scores: np.ndarray, positives: np.ndarray) -> float | None:
    """Area under precision-recall from a ranked binary list; None when the
    list has no positives (AP undefined)."""
    n_pos = int(positives.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = positives[order].astype(np.float64)
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    precision_at_hits = (cum / ranks)[hits > 0]
    return float(precision_at_hits.mean())


def average_precision(
    scores: np.ndarray, labels: np.ndarray, num_classes: int
) -> list[float | None]:
    """Per-class AP: rank all samples by that class's score; positives are
    samples of that class. Classes with no validation positives get None."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError("one score row per validation sample required")
    out: list[float | None] = []
    for c in range(num_classes):
        out.append(binary_average_precision(scores[:, c], labels == c))
    return out


def pooled_ranking_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Micro ranking: each sample appears once with its predicted-class
    score, positives are correct predictions. Zero when nothing is correct."""
    pred = scores.argmax(axis=1)
    confidence = scores[np.arange(len(labels)), pred]
    correct = pred == labels
    ap = binary_average_precision(confidence, correct)
    return 0.0 if ap is None else ap


def evaluate_probe(
    model: EncoderModel,
    probe: LinearProbe,
    records: dict[str, ImageRecord],
    config: ProbeConfig,
    *,
    model_name: str = "encoder",
    class_names: tuple[str, ...] | None = None,
) -> ProbeReport:
    ids, labels = _labeled(records, "probe_val")
    if not ids:
        raise ValueError("no probe_val records with labels")
    E = model.encode(feature_matrix(records, ids))
    scores = probe.scores(E)

    per_class = average_precision(scores, labels, config.num_classes)
    defined = [ap for ap in per_class if ap is not None]
    map_score = float(np.mean(defined)) if defined else 0.0

    counts = np.bincount(labels, minlength=config.num_classes)
    if config.map_star_mode == "pooled":
        map_star = pooled_ranking_ap(scores, labels)
    else:
        weighted = [
            (ap * counts[c]) for c, ap in enumerate(per_class) if ap is not None
        ]
        denom = sum(counts[c] for c, ap in enumerate(per_class) if ap is not None)
        map_star = float(sum(weighted) / denom) if denom else 0.0

    names = class_names or tuple(str(i) for i in range(config.num_classes))
    return ProbeReport(
        model_name=model_name,
        per_class_ap=per_class,
        map_score=map_score,
        map_star=map_star,
        top1_accuracy=float((scores.argmax(axis=1) == labels).mean()),
        n_val=len(ids),
        class_counts=counts.tolist(),
        class_names=list(names),
    )


def write_report(path, report: ProbeReport, extra: dict | None = None) -> None:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
