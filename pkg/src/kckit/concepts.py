"""Concept labels: short names for what a question tests.

The prompt frames the question as a worked exercise and asks for the
concept as a sentence completion:

    Exercise 1:
    <rendered question>

    Remark:
    The above exercise is a <type> question that tests whether the student
    understands the concept of <completion>

Real language-model backends complete the sentence under beam search with
stop characters. The builtin backend's generator only rehashes corpus
bigrams, so for it the extractor computes the stem's highest tf-idf word
pair instead; that stub keeps the full pipeline runnable offline and is a
stand-in, not a claim about model behavior.
"""

from __future__ import annotations

import csv
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .bank import Question, QuestionBank, render_question
from .backends import DecodeConfig, ScoringBackend
from .congruity import EXERCISE_1
from .errors import CapabilityError, ConfigError, EmptyGenerationError, KckitError

REMARK_TEMPLATE = (
    "\nRemark:\nThe above exercise is a {qtype} question "
    "that tests whether the student understands the concept of "
)


def _remark_qtype(qtype: str) -> str:
    # "Multiple Choice" reads as "a multiple-choice question" in the remark.
    return "-".join(qtype.strip().lower().split())


def concept_prompt(q: Question) -> str:
    """Completion prompt, ending exactly where the concept should begin."""
    return (
        EXERCISE_1
        + render_question(q)
        + REMARK_TEMPLATE.format(qtype=_remark_qtype(q.qtype))
    )


@dataclass(frozen=True)
class ConceptLabel:
    question_id: str
    label: str
    score: float

    def __post_init__(self) -> None:
        if not self.label or not self.label.strip():
            raise EmptyGenerationError(
                f"question {self.question_id!r}: empty concept label"
            )
        if any(ch in self.label for ch in ".,"):
            raise ConfigError(
                f"question {self.question_id!r}: concept label contains a stop character"
            )


def _sanitize(text: str) -> str:
    return text.strip().lower().rstrip(string.punctuation).strip()


def _stub_concept(q: Question, backend: ScoringBackend) -> tuple[str, float]:
    """Most informative stem word pair by tf-idf over the training corpus.

    Candidates are adjacent cleaned stem words; pairs containing a stop
    character are skipped, single-word stems fall back to the lone word.
    Ties break toward the earliest stem position.
    """
    words = backend.clean_tokens(q.stem)  # type: ignore[attr-defined]
    if not words:
        raise EmptyGenerationError(f"question {q.id!r}: stem has no usable words")
    pairs = list(zip(words, words[1:]))
    tf: dict[tuple[str, str], int] = {}
    for p in pairs:
        tf[p] = tf.get(p, 0) + 1
    best: tuple[str, str] | None = None
    best_score = float("-inf")
    for p in pairs:  # earliest occurrence wins ties
        label = f"{p[0]} {p[1]}"
        if any(ch in label for ch in ".,"):
            continue
        s = backend.pair_tfidf(p, tf[p])  # type: ignore[attr-defined]
        if s > best_score:
            best, best_score = p, s
    if best is None:
        # Stems of one word, or every pair carried a stop character.
        for w in words:
            if not any(ch in w for ch in ".,"):
                return w, 1.0
        raise EmptyGenerationError(f"question {q.id!r}: no stop-free concept candidate")
    return f"{best[0]} {best[1]}", best_score


def extract_concept(
    q: Question,
    backend: ScoringBackend,
    config: DecodeConfig | None = None,
) -> ConceptLabel:
    """One concept label for one question; lower-trimmed, stop-char free."""
    cfg = config or DecodeConfig()
    if backend.concept_stub:
        label, score = _stub_concept(q, backend)
    else:
        if not backend.can_generate:
            raise CapabilityError("backend cannot generate concept labels")
        text, score = backend.generate(concept_prompt(q), cfg)
        label = _sanitize(text)
        if not label:
            raise EmptyGenerationError(
                f"question {q.id!r}: generation produced no usable text"
            )
    return ConceptLabel(question_id=q.id, label=label, score=float(score))


def extract_all(
    bank: QuestionBank,
    backend: ScoringBackend,
    config: DecodeConfig | None = None,
    jobs: int = 1,
    resume_path: str | Path | None = None,
) -> dict[str, ConceptLabel]:
    """Concept labels for every question, in bank order.

    When ``resume_path`` is given, labels already present in that CSV are
    reused and each fresh label is appended as soon as it arrives, so an
    interrupted run resumes without repeating generations. Per-question
    failures are retried once; whatever still fails aborts the run with an
    aggregate error naming the questions.
    """
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    done: dict[str, ConceptLabel] = {}
    resume_path = Path(resume_path) if resume_path is not None else None
    if resume_path is not None and resume_path.exists():
        done = {
            c.question_id: c
            for c in load_concepts(resume_path).values()
            if c.question_id in bank
        }
    todo = [q for q in bank if q.id not in done]

    def attempt(q: Question) -> ConceptLabel | Exception:
        try:
            return extract_concept(q, backend, config)
        except KckitError:
            try:  # one retry per question
                return extract_concept(q, backend, config)
            except KckitError as exc:
                return exc

    if jobs == 1:
        results = [attempt(q) for q in todo]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(attempt, todo))

    failures = {
        q.id: r for q, r in zip(todo, results) if isinstance(r, Exception)
    }
    if failures:
        detail = "; ".join(f"{qid}: {err}" for qid, err in list(failures.items())[:5])
        raise KckitError(
            f"concept extraction failed for {len(failures)} question(s): {detail}"
        )
    fresh = [r for r in results if isinstance(r, ConceptLabel)]
    if resume_path is not None and fresh:
        new_file = not resume_path.exists()
        with resume_path.open("a", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(["question_id", "concept", "score"])
            for c in fresh:
                writer.writerow([c.question_id, c.label, repr(c.score)])
    done.update({c.question_id: c for c in fresh})
    return {qid: done[qid] for qid in bank.ids}


def save_concepts(concepts: Mapping[str, ConceptLabel], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "concept", "score"])
        for c in concepts.values():
            writer.writerow([c.question_id, c.label, repr(c.score)])


def load_concepts(path: str | Path) -> dict[str, ConceptLabel]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"concepts file not found: {path}")
    out: dict[str, ConceptLabel] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"concepts file {path} is empty") from None
        if [h.strip() for h in header] != ["question_id", "concept", "score"]:
            raise ConfigError(
                f"concepts file {path}: header must be 'question_id,concept,score'"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ConfigError(f"concepts line {lineno}: expected 3 fields")
            try:
                score = float(row[2])
            except ValueError:
                raise ConfigError(f"concepts line {lineno}: bad score") from None
            out[row[0]] = ConceptLabel(question_id=row[0], label=row[1], score=score)
    return out
