"""Zero-shot classification against prompt-built class embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import TeacherEmbedder, normalize_rows_np
from .backbone import EncoderPipeline
from .errors import ConfigError, ContractError, DataError
from .pointcloud import PointCloud

DEFAULT_TEMPLATES = ("a point cloud of a {}.", "a 3D model of a {}.")


@dataclass
class ClassEmbeddingTable:
    names: list[str]
    embeddings: np.ndarray  # C x joint_dim, unit rows
    templates: list[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"class names must be unique: {self.names}")
        norms = np.sqrt((self.embeddings**2).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractError("class embeddings must be unit norm")

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"label {name!r} is not a class in the table") from None


def build_class_embeddings(classes, templates=DEFAULT_TEMPLATES, teacher: TeacherEmbedder | None = None,
                           joint_dim: int | None = None) -> ClassEmbeddingTable:
    """Per class: embed each filled template, normalise, average, renormalise."""
    classes, templates = list(classes), list(templates)
    if not classes or not templates:
        raise ContractError("need at least one class and one template")
    if len(set(classes)) != len(classes):
        raise ConfigError(f"duplicate class names: {classes}")
    if teacher is None:
        if joint_dim is None:
            raise ContractError("pass a teacher or a joint_dim")
        teacher = TeacherEmbedder("text", joint_dim)
    rows = []
    for name in classes:
        caps = normalize_rows_np(np.stack([teacher.embed_array(t.format(name)) for t in templates]))
        rows.append(caps.mean(axis=0))
    return ClassEmbeddingTable(classes, normalize_rows_np(np.stack(rows)), templates)


def rank_from_similarities(sims, names) -> list[int]:
    """Indices sorted by descending similarity, ties by class name."""
    sims = np.asarray(sims, dtype=np.float64)
    return sorted(range(len(names)), key=lambda i: (-sims[i], names[i]))


def classify_topk(shape_feature, table: ClassEmbeddingTable, k: int) -> list[str]:
    c = len(table.names)
    if not 1 <= k <= c:
        raise ContractError(f"k must lie in 1..{c}, got {k}")
    f = np.asarray(shape_feature.data if hasattr(shape_feature, "data") else shape_feature, dtype=np.float64)
    sims = table.embeddings @ f
    return [table.names[i] for i in rank_from_similarities(sims, table.names)[:k]]


def topk_accuracy(predictions, labels, ks=(1, 3, 5)) -> dict[int, float]:
    """Percentage of samples whose label is within the first k ranks."""
    if len(predictions) != len(labels):
        raise ContractError(f"{len(predictions)} predictions for {len(labels)} labels")
    n = len(labels)
    if n == 0:
        raise DataError("no samples to score")
    out = {}
    for k in ks:
        hits = sum(1 for ranked, y in zip(predictions, labels) if y in ranked[:k])
        out[int(k)] = 100.0 * hits / n
    return out


def evaluate_features(features: np.ndarray, labels: list[str], table: ClassEmbeddingTable,
                      ks=(1, 3, 5)) -> dict:
    """Report over precomputed unit features (one row per sample)."""
    for y in labels:
        table.index(y)
    features = normalize_rows_np(np.asarray(features, dtype=np.float64))
    rankings = [classify_topk(f, table, len(table.names)) for f in features]
    acc = topk_accuracy(rankings, labels, ks)
    per_class = {}
    confusion = {a: {b: 0 for b in table.names} for a in table.names}
    for ranked, y in zip(rankings, labels):
        confusion[y][ranked[0]] += 1
    for name in table.names:
        total = sum(confusion[name].values())
        if total:
            per_class[name] = 100.0 * confusion[name][name] / total
    return {
        "n": len(labels),
        "topk": {f"top{k}": v for k, v in acc.items()},
        "per_class": per_class,
        "confusion": confusion,
        "classes": list(table.names),
        "templates": list(table.templates),
    }


def eval_dataset(clouds: list[PointCloud], labels: list[str], pipe: EncoderPipeline,
                 table: ClassEmbeddingTable, ks=(1, 3, 5), batch_size: int = 64) -> dict:
    """Encode, normalise, classify and aggregate; independent of sample order."""
    if len(clouds) != len(labels):
        raise ContractError("clouds and labels differ in length")
    for y in labels:
        table.index(y)
    feats = []
    for i in range(0, len(clouds), batch_size):
        feats.append(pipe.encode_clouds(clouds[i : i + batch_size]).data)
    return evaluate_features(np.concatenate(feats), labels, table, ks)
