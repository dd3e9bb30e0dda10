"""Cosine-similarity and PCA views of language-to-pivot steering vectors."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pivotsteer.linalg import cosine_similarity, pca
from pivotsteer.steering import SteeringArtifact, atomic_write_text


@dataclass(frozen=True)
class SimilarityMatrix:
    labels: tuple[str, ...]
    layer_index: int
    values: np.ndarray


def _layer_vectors(artifacts: Sequence[SteeringArtifact], layer: int) -> np.ndarray:
    if not artifacts:
        raise ValueError("no artifacts given")
    first = artifacts[0]
    for a in artifacts:
        if a.method != "vector":
            raise ValueError(f"artifact {a.source_lang}->{a.target_lang} is not vector-method")
        if a.target_lang != first.target_lang:
            raise ValueError(
                f"mixed target languages: {first.target_lang!r} and {a.target_lang!r}"
            )
        if (a.d, len(a.per_layer)) != (first.d, len(first.per_layer)):
            raise ValueError("artifacts disagree on dimension or layer count")
    n = len(first.per_layer)
    if not 0 <= layer < n:
        raise ValueError(f"layer {layer} out of range; valid layers are 0..{n - 1}")
    return np.stack([a.per_layer[layer] for a in artifacts])


def vector_similarity(artifacts: Sequence[SteeringArtifact], layer: int) -> SimilarityMatrix:
    vecs = _layer_vectors(artifacts, layer)
    k = len(vecs)
    vals = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            vals[i, j] = vals[j, i] = cosine_similarity(vecs[i], vecs[j])
    return SimilarityMatrix(tuple(a.source_lang for a in artifacts), layer, vals)


def vector_pca(
    artifacts: Sequence[SteeringArtifact], layer: int, k: int = 2
) -> list[tuple[str, np.ndarray]]:
    """(label, coordinates) per artifact in the top-``k`` principal plane."""
    if len(artifacts) < 2:
        raise ValueError("need >= 2 artifacts for PCA")
    vecs = _layer_vectors(artifacts, layer)
    k = min(k, len(vecs), vecs.shape[1])
    res = pca(vecs, k)
    return [(a.source_lang, res.projections[i]) for i, a in enumerate(artifacts)]


def heatmap_csv(sim: SimilarityMatrix) -> str:
    order = sorted(range(len(sim.labels)), key=lambda i: sim.labels[i])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + [sim.labels[i] for i in order])
    for i in order:
        w.writerow([sim.labels[i]] + [format(sim.values[i, j], ".17g") for j in order])
    return buf.getvalue()


def emit_heatmap_data(sim: SimilarityMatrix, path: str | Path) -> None:
    atomic_write_text(path, heatmap_csv(sim))


def pca_csv(rows: Sequence[tuple[str, np.ndarray]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = len(rows[0][1]) if rows else 0
    w.writerow(["label"] + [f"pc{i + 1}" for i in range(k)])
    for label, coords in sorted(rows, key=lambda r: r[0]):
        w.writerow([label] + [format(c, ".17g") for c in coords])
    return buf.getvalue()


def emit_pca_data(rows: Sequence[tuple[str, np.ndarray]], path: str | Path) -> None:
    atomic_write_text(path, pca_csv(rows))


def read_heatmap_csv(path: str | Path) -> SimilarityMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        table = list(csv.reader(fh))
    labels = tuple(table[0][1:])
    vals = np.array([[float(x) for x in row[1:]] for row in table[1:]])
    return SimilarityMatrix(labels, -1, vals)
