"""Pairwise question congruity from conditional log-probabilities.

For questions s and t,

    delta(s, t) = log Pr(render(s) | framed render(t)) - log Pr(render(s))
    congruity(s, t) = (delta(s, t) + delta(t, s)) / 2

estimated by a scoring backend over two byte-exact prompt layouts: the
conditional prompt frames t as "Exercise 1:" and asks for "Exercise 2:",
while the marginal prompt shows "Exercise 2:" alone. A backend that ignores
context scores both identically, so every congruity degenerates to zero;
any signal a matrix carries therefore comes from conditioning.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import Question, QuestionBank, render_question
from .backends import ScoringBackend
from .errors import BackendError, ConfigError

EXERCISE_1 = "Exercise 1:\n"
EXERCISE_2 = "Exercise 2:\n"


def conditional_prompt(q_t: Question, q_s: Question) -> tuple[str, str]:
    """(prompt, continuation) scoring s in the context of t."""
    prompt = EXERCISE_1 + render_question(q_t) + "\n" + EXERCISE_2
    return prompt, render_question(q_s)


def marginal_prompt(q_s: Question) -> tuple[str, str]:
    """(prompt, continuation) scoring s with no exercise before it."""
    return EXERCISE_2, render_question(q_s)


def delta(q_s: Question, q_t: Question, backend: ScoringBackend) -> float:
    """Log-probability lift of s from conditioning on t."""
    if q_s.id == q_t.id:
        raise ConfigError("delta needs two distinct questions")
    cond = backend.cond_logprob(*conditional_prompt(q_t, q_s))
    marg = backend.cond_logprob(*marginal_prompt(q_s))
    return cond - marg


def congruity(q_s: Question, q_t: Question, backend: ScoringBackend) -> float:
    """Symmetrized delta; computing (s, t) and (t, s) gives the same float."""
    return 0.5 * (delta(q_s, q_t, backend) + delta(q_t, q_s, backend))


@dataclass(frozen=True)
class AffinityMatrix:
    """Symmetric question-pair affinities with an unset (NaN) diagonal.

    ``values[i, j]`` is the affinity between ``ids[i]`` and ``ids[j]``. The
    diagonal is reserved for the clustering preference and left NaN here;
    all off-diagonal entries must be finite and exactly symmetric.
    """

    ids: tuple[str, ...]
    values: np.ndarray
    metric_tag: str

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        n = len(self.ids)
        if v.shape != (n, n):
            raise ConfigError(f"matrix shape {v.shape} does not match {n} ids")
        if len(set(self.ids)) != n:
            raise ConfigError("duplicate ids in affinity matrix")
        off = ~np.eye(n, dtype=bool)
        if n > 1 and not np.isfinite(v[off]).all():
            raise ConfigError("off-diagonal affinities must be finite")
        if not np.array_equal(v.T[off], v[off]):
            raise ConfigError("affinity matrix must be exactly symmetric")
        v = v.copy()
        np.fill_diagonal(v, np.nan)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.ids)

    def off_diagonal(self) -> np.ndarray:
        off = ~np.eye(len(self.ids), dtype=bool)
        return self.values[off]

    def submatrix(self, keep_ids: list[str]) -> "AffinityMatrix":
        pos = {qid: i for i, qid in enumerate(self.ids)}
        missing = [qid for qid in keep_ids if qid not in pos]
        if missing:
            raise ConfigError(f"ids not in matrix: {missing}")
        idx = [pos[qid] for qid in keep_ids]
        return AffinityMatrix(
            ids=tuple(keep_ids),
            values=self.values[np.ix_(idx, idx)],
            metric_tag=self.metric_tag,
        )


def congruity_matrix(
    bank: QuestionBank,
    backend: ScoringBackend,
    jobs: int = 1,
) -> AffinityMatrix:
    """All-pairs congruity over the bank.

    Each question's marginal is scored exactly once (N backend calls) and
    each ordered pair once more (N(N-1) calls). Work can fan out over a
    bounded thread pool; results are merged by pair index, so the matrix is
    identical whatever the completion order. With a cache-wrapped backend
    every scored pair persists immediately, which makes an aborted run
    resumable at no extra cost.
    """
    questions = list(bank)
    n = len(questions)
    if n < 2:
        raise ConfigError("congruity matrix needs at least two questions")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")

    marg_tasks = [marginal_prompt(q) for q in questions]
    pair_index = [(i, j) for i in range(n) for j in range(n) if i != j]
    # cond[(t, s)] scores continuation s conditioned on exercise t.
    cond_tasks = {
        (t, s): conditional_prompt(questions[t], questions[s]) for t, s in pair_index
    }

    def score(task: tuple[str, str]) -> float:
        return backend.cond_logprob(*task)

    try:
        if jobs == 1:
            marg = [score(t) for t in marg_tasks]
            cond = {key: score(t) for key, t in cond_tasks.items()}
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                marg = list(pool.map(score, marg_tasks))
                keys = list(cond_tasks)
                vals = pool.map(score, (cond_tasks[k] for k in keys))
                cond = dict(zip(keys, vals))
    except BackendError as exc:
        raise BackendError(
            f"congruity matrix aborted: {exc}. Scored pairs persist in the "
            "cache (if one is attached); rerunning resumes from there."
        ) from exc

    values = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i + 1, n):
            d_ij = cond[(j, i)] - marg[i]  # delta(q_i, q_j)
            d_ji = cond[(i, j)] - marg[j]
            c = 0.5 * (d_ij + d_ji)
            values[i, j] = c
            values[j, i] = c
    return AffinityMatrix(ids=bank.ids, values=values, metric_tag="congruity")


def save_matrix(matrix: AffinityMatrix, path: str | Path) -> None:
    """CSV with an id header and empty diagonal cells, plus a sidecar
    ``<path>.meta.json`` recording the metric tag."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *matrix.ids])
        for i, qid in enumerate(matrix.ids):
            row: list[str] = [qid]
            for j in range(len(matrix.ids)):
                row.append("" if i == j else repr(float(matrix.values[i, j])))
            writer.writerow(row)
    meta = {"metric": matrix.metric_tag, "n": len(matrix.ids)}
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, indent=2) + "\n", encoding="utf-8"
    )


def load_matrix(path: str | Path) -> AffinityMatrix:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"matrix file not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"matrix file {path} is empty") from None
        if not header or header[0] != "id":
            raise ConfigError(f"matrix file {path}: first header cell must be 'id'")
        ids = tuple(header[1:])
        n = len(ids)
        values = np.full((n, n), np.nan)
        for i, row in enumerate(reader):
            if i >= n:
                raise ConfigError(f"matrix file {path}: more rows than ids")
            if len(row) != n + 1 or row[0] != ids[i]:
                raise ConfigError(f"matrix file {path}: malformed row {i + 2}")
            for j, cell in enumerate(row[1:]):
                if cell == "":
                    if i != j:
                        raise ConfigError(
                            f"matrix file {path}: empty off-diagonal cell at row {i + 2}"
                        )
                    continue
                try:
                    values[i, j] = float(cell)
                except ValueError:
                    raise ConfigError(
                        f"matrix file {path}: bad float at row {i + 2}, col {j + 2}"
                    ) from None
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    tag = "unknown"
    if meta_path.exists():
        try:
            tag = json.loads(meta_path.read_text(encoding="utf-8"))["metric"]
        except (json.JSONDecodeError, KeyError):
            raise ConfigError(f"matrix metadata {meta_path} is malformed") from None
    return AffinityMatrix(ids=ids, values=values, metric_tag=tag)
