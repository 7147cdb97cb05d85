"""Embedding-based affinities: the baselines congruity is compared against.

Questions are embedded under the same exercise framing used everywhere else
(marker text is excluded from the average by backends that support the
split); concept labels are embedded bare. Pairwise affinity is negative
cosine distance, ``cos(x, y) - 1``, which lives in [-2, 0] and is 0 only
for perfectly aligned vectors.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bank import QuestionBank, render_question
from .backends import ScoringBackend
from .concepts import ConceptLabel
from .congruity import EXERCISE_1, AffinityMatrix
from .errors import CapabilityError, ConfigError


@dataclass(frozen=True)
class EmbeddingSet:
    """Float32 vectors for a fixed id order; all rows share one dimension."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    source: str  # "question" or "concept"

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] != len(self.ids):
            raise ConfigError("embedding matrix shape does not match ids")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError("duplicate ids in embedding set")
        if not np.isfinite(v).all():
            raise ConfigError("embeddings must be finite")
        if v.shape[0] and (np.abs(v).sum(axis=1) == 0).any():
            raise ConfigError("zero embedding vector: broken backend output")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def neg_cos(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity minus one: 0 for aligned vectors, -2 for opposed."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise ConfigError("cannot take cosine distance of a zero vector")
    return float(np.dot(x, y) / (nx * ny)) - 1.0


def question_embeddings(bank: QuestionBank, backend: ScoringBackend) -> EmbeddingSet:
    """One vector per question, rendered with the exercise marker split off."""
    if not backend.can_embed:
        raise CapabilityError("backend cannot embed")
    contents = [render_question(q) for q in bank]
    markers = [EXERCISE_1] * len(contents)
    vectors = backend.embed(contents, markers=markers)
    return EmbeddingSet(
        ids=bank.ids, vectors=np.vstack(vectors).astype(np.float32), source="question"
    )


def concept_embeddings(
    concepts: Mapping[str, ConceptLabel], backend: ScoringBackend
) -> EmbeddingSet:
    """One vector per question's concept label, keyed by question id."""
    if not backend.can_embed:
        raise CapabilityError("backend cannot embed")
    if not concepts:
        raise ConfigError("no concept labels to embed")
    ids = tuple(concepts.keys())
    vectors = backend.embed([concepts[qid].label for qid in ids])
    return EmbeddingSet(
        ids=ids, vectors=np.vstack(vectors).astype(np.float32), source="concept"
    )


def embedding_affinity(embeddings: EmbeddingSet) -> AffinityMatrix:
    """Pairwise negative cosine distance; diagonal left unset."""
    n = len(embeddings.ids)
    if n < 2:
        raise ConfigError("affinity matrix needs at least two embeddings")
    v = embeddings.vectors.astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    if (norms == 0).any():
        raise ConfigError("cannot take cosine distance of a zero vector")
    unit = v / norms[:, None]
    sims = unit @ unit.T - 1.0
    # Exact symmetry is demanded downstream; the dot products are symmetric
    # mathematically but not bit-for-bit, so mirror the upper triangle.
    sims = np.triu(sims, 1)
    sims = sims + sims.T
    np.fill_diagonal(sims, np.nan)
    tag = f"neg-cos-{embeddings.source}"
    return AffinityMatrix(ids=embeddings.ids, values=sims, metric_tag=tag)


def save_embeddings(embeddings: EmbeddingSet, path: str | Path) -> None:
    """Two files: ``<path>.json`` (ids, dim, source) and ``<path>.bin``
    (row-major packed float32)."""
    path = Path(path)
    meta = {
        "ids": list(embeddings.ids),
        "dim": embeddings.dim,
        "dtype": "float32",
        "source": embeddings.source,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2) + "\n", encoding="utf-8"
    )
    path.with_suffix(path.suffix + ".bin").write_bytes(
        np.ascontiguousarray(embeddings.vectors, dtype="<f4").tobytes()
    )


def load_embeddings(path: str | Path) -> EmbeddingSet:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".json")
    bin_path = path.with_suffix(path.suffix + ".bin")
    if not meta_path.exists() or not bin_path.exists():
        raise ConfigError(f"embedding files not found at {path}(.json/.bin)")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        ids = tuple(str(x) for x in meta["ids"])
        dim = int(meta["dim"])
        source = str(meta.get("source", "question"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        raise ConfigError(f"embedding metadata {meta_path} is malformed") from None
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    if raw.size != len(ids) * dim:
        raise ConfigError(
            f"embedding payload {bin_path} holds {raw.size} floats, "
            f"expected {len(ids) * dim}"
        )
    return EmbeddingSet(ids=ids, vectors=raw.reshape(len(ids), dim), source=source)


def export_embeddings_csv(embeddings: EmbeddingSet, path: str | Path) -> None:
    """Debug-friendly CSV mirror of the binary layout."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *[f"d{i}" for i in range(embeddings.dim)]])
        for qid, row in zip(embeddings.ids, embeddings.vectors):
            writer.writerow([qid, *[repr(float(x)) for x in row]])
