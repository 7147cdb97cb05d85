"""KC models, Q-matrices, and partition-agreement metrics.

A KC model names a total mapping from question ids to knowledge-component
labels. Two models over the same questions are compared as partitions with
six standard scores: adjusted Rand, adjusted mutual information,
Fowlkes-Mallows, homogeneity, completeness, and V-measure. All entropies and
mutual informations use natural logarithms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError

if TYPE_CHECKING:  # pragma: no cover - typing only, avoids import cycles
    from .bank import QuestionBank
    from .cluster import ClusterAssignment
    from .concepts import ConceptLabel


@dataclass(frozen=True)
class KCModel:
    """A named, total assignment of questions to KC labels."""

    name: str
    mapping: dict[str, str]

    def __post_init__(self) -> None:
        if not self.mapping:
            raise ConfigError(f"KC model {self.name!r}: empty mapping")
        for qid, label in self.mapping.items():
            if not str(label).strip():
                raise ConfigError(f"KC model {self.name!r}: empty label for {qid!r}")

    @property
    def kc_count(self) -> int:
        return len(set(self.mapping.values()))

    def labels_for(self, qids: Sequence[str]) -> list[str]:
        try:
            return [self.mapping[qid] for qid in qids]
        except KeyError as exc:
            raise ConfigError(
                f"KC model {self.name!r} does not cover question {exc}"
            ) from None

    def question_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for label in self.mapping.values():
            counts[label] = counts.get(label, 0) + 1
        return counts


def single_kc_model(bank: "QuestionBank", label: str = "all") -> KCModel:
    """Baseline: every question shares one KC."""
    return KCModel(name="single-kc", mapping={qid: label for qid in bank.ids})


def unique_step_model(bank: "QuestionBank") -> KCModel:
    """Baseline: every question is its own KC."""
    return KCModel(name="unique-step", mapping={qid: qid for qid in bank.ids})


def from_clusters(
    assignment: "ClusterAssignment",
    concepts: Mapping[str, "ConceptLabel"],
    merge_duplicates: bool = False,
    name: str = "clustered",
) -> KCModel:
    """Label every clustered question with its exemplar's concept.

    Distinct clusters whose exemplars share a concept string are merged when
    ``merge_duplicates`` is set; otherwise later clusters get a ``#2``,
    ``#3``, ... suffix in cluster-index order.
    """
    cluster_label: dict[int, str] = {}
    used: dict[str, int] = {}
    for idx in sorted(assignment.exemplars):
        exemplar_id = assignment.exemplars[idx]
        if exemplar_id not in concepts:
            raise ConfigError(f"no concept label for exemplar {exemplar_id!r}")
        base = concepts[exemplar_id].label
        if merge_duplicates:
            cluster_label[idx] = base
            continue
        seen = used.get(base, 0) + 1
        used[base] = seen
        cluster_label[idx] = base if seen == 1 else f"{base}#{seen}"
    mapping = {qid: cluster_label[c] for qid, c in assignment.labels.items()}
    return KCModel(name=name, mapping=mapping)


@dataclass(frozen=True)
class QMatrix:
    """Binary question-by-KC incidence matrix.

    Rows follow the question order the matrix was built with; models built
    by :func:`to_qmatrix` are one-hot, loaded external matrices may tag a
    question with several KCs.
    """

    question_ids: tuple[str, ...]
    kc_labels: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.int8)
        if m.shape != (len(self.question_ids), len(self.kc_labels)):
            raise ConfigError("Q-matrix shape does not match its labels")
        if not np.isin(m, (0, 1)).all():
            raise ConfigError("Q-matrix entries must be 0 or 1")
        if len(self.question_ids) and (m.sum(axis=1) == 0).any():
            raise ConfigError("every Q-matrix row needs at least one KC")
        object.__setattr__(self, "matrix", m)

    def row(self, qid: str) -> np.ndarray:
        return self.matrix[self.question_ids.index(qid)]

    def kcs_of(self, qid: str) -> list[str]:
        r = self.row(qid)
        return [self.kc_labels[k] for k in np.flatnonzero(r)]


def to_qmatrix(model: KCModel, bank: "QuestionBank") -> QMatrix:
    """One-hot Q-matrix over ``bank`` order; columns in first-appearance order."""
    labels: list[str] = []
    col: dict[str, int] = {}
    for qid in bank.ids:
        label = model.mapping.get(qid)
        if label is None:
            raise ConfigError(f"KC model {model.name!r} does not cover {qid!r}")
        if label not in col:
            col[label] = len(labels)
            labels.append(label)
    m = np.zeros((len(bank), len(labels)), dtype=np.int8)
    for row, qid in enumerate(bank.ids):
        m[row, col[model.mapping[qid]]] = 1
    return QMatrix(question_ids=bank.ids, kc_labels=tuple(labels), matrix=m)


# ---------------------------------------------------------------------------
# Partition agreement metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContingencyTable:
    """Joint label counts between a class partition A and a cluster partition B."""

    class_labels: tuple[str, ...]
    cluster_labels: tuple[str, ...]
    counts: np.ndarray
    n: int

    @classmethod
    def from_sequences(cls, a: Sequence[str], b: Sequence[str]) -> "ContingencyTable":
        if len(a) != len(b):
            raise ConfigError("label sequences differ in length")
        if not a:
            raise ConfigError("cannot build a contingency table from no items")
        ca = sorted(set(a))
        cb = sorted(set(b))
        ia = {lab: i for i, lab in enumerate(ca)}
        ib = {lab: i for i, lab in enumerate(cb)}
        counts = np.zeros((len(ca), len(cb)), dtype=np.int64)
        for x, y in zip(a, b):
            counts[ia[x], ib[y]] += 1
        return cls(tuple(ca), tuple(cb), counts, len(a))

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _aligned_labels(a: KCModel, b: KCModel) -> tuple[list[str], list[str]]:
    if set(a.mapping) != set(b.mapping):
        raise ConfigError(
            f"models {a.name!r} and {b.name!r} cover different question sets"
        )
    qids = sorted(a.mapping)
    return a.labels_for(qids), b.labels_for(qids)


def _table(a: KCModel, b: KCModel) -> ContingencyTable:
    la, lb = _aligned_labels(a, b)
    return ContingencyTable.from_sequences(la, lb)


def _comb2(x: np.ndarray | int) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand(a: KCModel, b: KCModel) -> float:
    """Pair-counting agreement, corrected for chance. Range [-0.5, 1]."""
    t = _table(a, b)
    sum_comb = float(_comb2(t.counts).sum())
    a_comb = float(_comb2(t.row_sums).sum())
    b_comb = float(_comb2(t.col_sums).sum())
    total = float(_comb2(t.n))
    expected = a_comb * b_comb / total if total else 0.0
    max_index = 0.5 * (a_comb + b_comb)
    if max_index == expected:
        # Both partitions trivial (all singletons or all one cluster): identical.
        return 1.0
    return (sum_comb - expected) / (max_index - expected)


def _entropy(sizes: np.ndarray, n: int) -> float:
    p = sizes[sizes > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_info(t: ContingencyTable) -> float:
    n = t.n
    nz = t.counts > 0
    nij = t.counts[nz].astype(np.float64)
    ai = np.broadcast_to(t.row_sums[:, None], t.counts.shape)[nz].astype(np.float64)
    bj = np.broadcast_to(t.col_sums[None, :], t.counts.shape)[nz].astype(np.float64)
    return float((nij / n * (np.log(n * nij) - np.log(ai * bj))).sum())


def _expected_mutual_info(t: ContingencyTable) -> float:
    """Hypergeometric-model expectation of MI for fixed marginals."""
    n = t.n
    ai = t.row_sums.astype(np.int64)
    bj = t.col_sums.astype(np.int64)
    # Precompute log factorials up to n.
    lg = gammaln(np.arange(n + 2, dtype=np.float64))
    emi = 0.0
    for a_u in ai:
        for b_v in bj:
            lo = max(1, a_u + b_v - n)
            hi = min(a_u, b_v)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.int64)
            term1 = nij / n * (np.log(n * nij.astype(np.float64)) - math.log(a_u * b_v))
            log_hyper = (
                lg[a_u + 1] + lg[b_v + 1] + lg[n - a_u + 1] + lg[n - b_v + 1]
                - lg[n + 1] - lg[nij + 1] - lg[a_u - nij + 1] - lg[b_v - nij + 1]
                - lg[n - a_u - b_v + nij + 1]
            )
            emi += float((term1 * np.exp(log_hyper)).sum())
    return emi


def adjusted_mutual_info(a: KCModel, b: KCModel) -> float:
    """MI corrected for chance, normalized by mean entropy. Range (-inf, 1]."""
    t = _table(a, b)
    h_a = _entropy(t.row_sums, t.n)
    h_b = _entropy(t.col_sums, t.n)
    if h_a == 0.0 and h_b == 0.0:
        # Single class against single cluster: identical trivial partitions.
        return 1.0
    mi = _mutual_info(t)
    emi = _expected_mutual_info(t)
    normalizer = 0.5 * (h_a + h_b)
    denominator = normalizer - emi
    eps = np.finfo(np.float64).eps
    if denominator < 0:
        denominator = min(denominator, -eps)
    else:
        denominator = max(denominator, eps)
    return float((mi - emi) / denominator)


def fowlkes_mallows(a: KCModel, b: KCModel) -> float:
    """Geometric mean of pairwise precision and recall. Range [0, 1]."""
    t = _table(a, b)
    tp = float(_comb2(t.counts).sum())
    same_a = float(_comb2(t.row_sums).sum())  # tp + fn
    same_b = float(_comb2(t.col_sums).sum())  # tp + fp
    if same_a == 0.0 or same_b == 0.0:
        return 0.0
    return tp / math.sqrt(same_a * same_b)


def _conditional_entropy(t: ContingencyTable, given_clusters: bool) -> float:
    # H(A|B) when given_clusters, else H(B|A).
    counts = t.counts if given_clusters else t.counts.T
    marg = counts.sum(axis=0)
    h = 0.0
    n = t.n
    for j in range(counts.shape[1]):
        col = counts[:, j]
        nz = col[col > 0].astype(np.float64)
        if marg[j] == 0:
            continue
        h -= float((nz / n * (np.log(nz) - math.log(marg[j]))).sum())
    return h


def homogeneity(a: KCModel, b: KCModel) -> float:
    """1 when each cluster of ``b`` holds a single class of ``a``."""
    t = _table(a, b)
    h_a = _entropy(t.row_sums, t.n)
    if h_a == 0.0:
        return 1.0
    return 1.0 - _conditional_entropy(t, given_clusters=True) / h_a


def completeness(a: KCModel, b: KCModel) -> float:
    """1 when each class of ``a`` lands in a single cluster of ``b``."""
    t = _table(a, b)
    h_b = _entropy(t.col_sums, t.n)
    if h_b == 0.0:
        return 1.0
    return 1.0 - _conditional_entropy(t, given_clusters=False) / h_b


def v_measure(a: KCModel, b: KCModel) -> float:
    """Harmonic mean of homogeneity and completeness."""
    h = homogeneity(a, b)
    c = completeness(a, b)
    if h + c == 0.0:
        return 0.0
    return 2.0 * h * c / (h + c)


METRICS = (
    ("adjusted_rand", adjusted_rand),
    ("adjusted_mutual_info", adjusted_mutual_info),
    ("fowlkes_mallows", fowlkes_mallows),
    ("homogeneity", homogeneity),
    ("completeness", completeness),
    ("v_measure", v_measure),
)


def alignment_report(model: KCModel, reference: KCModel) -> dict:
    """All six agreement scores of ``model`` against ``reference``.

    The reference plays the class role for homogeneity/completeness, so
    homogeneity reads "each discovered cluster is pure w.r.t. the reference".
    """
    scores = {name: fn(reference, model) for name, fn in METRICS}
    return {
        "model": model.name,
        "reference": reference.name,
        "kc_count": model.kc_count,
        "reference_kc_count": reference.kc_count,
        "metrics": scores,
    }
