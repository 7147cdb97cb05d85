"""Question banks, student transaction logs, and the files they live in.

Identifiers are opaque strings. A bank fixes the positional order of its
questions; affinity matrices and embeddings downstream index rows by that
order, so loaders never reorder records.

File formats
------------
Bank: JSONL, one object per line with keys ``id``, ``type``, ``stem``,
``choices`` (list of ``{"label", "text"}``), ``answer_label`` and an
optional ``expert_kc`` tag.

Transactions: CSV with header ``student_id,question_id,seq,outcome``.

KC model: CSV with header ``question_id,kc_label``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import ConfigError
from .kcmodel import KCModel


@dataclass(frozen=True)
class Choice:
    label: str
    body: str

    def __post_init__(self) -> None:
        if not self.label.strip():
            raise ConfigError("choice label must be non-empty")
        if not self.body.strip():
            raise ConfigError("choice body must be non-empty")


def _is_mcq(qtype: str) -> bool:
    return "multiple choice" in qtype.strip().lower()


@dataclass(frozen=True)
class Question:
    """One exercise: a typed stem with labelled choices and a keyed answer."""

    id: str
    qtype: str
    stem: str
    choices: tuple[Choice, ...]
    answer_label: str
    expert_kc: str | None = None

    def __post_init__(self) -> None:
        if not self.id.strip():
            raise ConfigError("question id must be non-empty")
        if not self.qtype.strip():
            raise ConfigError(f"question {self.id!r}: type must be non-empty")
        if not self.stem.strip():
            raise ConfigError(f"question {self.id!r}: stem must be non-empty")
        if not self.choices:
            raise ConfigError(f"question {self.id!r}: needs at least one choice")
        if _is_mcq(self.qtype) and len(self.choices) < 2:
            raise ConfigError(
                f"question {self.id!r}: multiple-choice questions need >= 2 choices"
            )
        labels = [c.label for c in self.choices]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"question {self.id!r}: duplicate choice labels")
        if self.answer_label not in labels:
            raise ConfigError(
                f"question {self.id!r}: answer label {self.answer_label!r} "
                f"not among choice labels {labels}"
            )

    @property
    def answer_body(self) -> str:
        for c in self.choices:
            if c.label == self.answer_label:
                return c.body
        raise AssertionError("unreachable: answer label validated on construction")


def render_question(q: Question) -> str:
    """Serialize a question into its canonical prompt block.

    The layout is whitespace-sensitive and newline-terminated: a type line
    ending in a colon, the stem, one ``label) body`` line per choice, and an
    ``Answer:`` line restating the keyed choice. Callers add any
    ``Exercise 1:`` style framing around the block themselves.
    """
    lines = [f"{q.qtype}:", q.stem]
    lines.extend(f"{c.label}) {c.body}" for c in q.choices)
    lines.append(f"Answer: {q.answer_label}) {q.answer_body}")
    return "\n".join(lines) + "\n"


class QuestionBank:
    """An ordered collection of questions with unique ids."""

    def __init__(self, questions: list[Question] | tuple[Question, ...]):
        self.questions: tuple[Question, ...] = tuple(questions)
        self._index: dict[str, int] = {}
        for pos, q in enumerate(self.questions):
            if q.id in self._index:
                raise ConfigError(f"duplicate question id {q.id!r}")
            self._index[q.id] = pos

    def __len__(self) -> int:
        return len(self.questions)

    def __iter__(self) -> Iterator[Question]:
        return iter(self.questions)

    def __contains__(self, qid: str) -> bool:
        return qid in self._index

    def by_id(self, qid: str) -> Question:
        try:
            return self.questions[self._index[qid]]
        except KeyError:
            raise ConfigError(f"unknown question id {qid!r}") from None

    def position(self, qid: str) -> int:
        if qid not in self._index:
            raise ConfigError(f"unknown question id {qid!r}")
        return self._index[qid]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.questions)

    def subset(self, qids: list[str]) -> "QuestionBank":
        """A new bank holding ``qids`` in this bank's positional order."""
        wanted = set(qids)
        missing = wanted - set(self._index)
        if missing:
            raise ConfigError(f"unknown question ids: {sorted(missing)}")
        return QuestionBank([q for q in self.questions if q.id in wanted])

    def expert_model(self, name: str = "expert") -> KCModel | None:
        """The expert-tag KC model, or None unless every question is tagged."""
        if any(q.expert_kc is None for q in self.questions):
            return None
        return KCModel(name=name, mapping={q.id: q.expert_kc for q in self.questions})


def _parse_question(record: dict, lineno: int) -> Question:
    try:
        choices = tuple(
            Choice(label=str(c["label"]), body=str(c["text"]))
            for c in record.get("choices", [])
        )
        return Question(
            id=str(record["id"]),
            qtype=str(record["type"]),
            stem=str(record["stem"]),
            choices=choices,
            answer_label=str(record["answer_label"]),
            expert_kc=(None if record.get("expert_kc") is None else str(record["expert_kc"])),
        )
    except KeyError as exc:
        raise ConfigError(f"bank line {lineno}: missing key {exc}") from None


def load_bank(path: str | Path) -> QuestionBank:
    """Load a JSONL question bank, preserving record order."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"bank file not found: {path}")
    questions: list[Question] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bank line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ConfigError(f"bank line {lineno}: expected an object")
            questions.append(_parse_question(record, lineno))
    if not questions:
        raise ConfigError(f"bank file {path} holds no questions")
    return QuestionBank(questions)


def save_bank(bank: QuestionBank, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for q in bank:
            record = {
                "id": q.id,
                "type": q.qtype,
                "stem": q.stem,
                "choices": [{"label": c.label, "text": c.body} for c in q.choices],
                "answer_label": q.answer_label,
            }
            if q.expert_kc is not None:
                record["expert_kc"] = q.expert_kc
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class Transaction:
    student_id: str
    question_id: str
    seq: int
    outcome: int

    def __post_init__(self) -> None:
        if self.outcome not in (0, 1):
            raise ConfigError(
                f"transaction ({self.student_id}, seq {self.seq}): "
                f"outcome must be 0 or 1, got {self.outcome!r}"
            )


@dataclass(frozen=True)
class TransactionLog:
    """Student attempts in canonical order: sorted by (student_id, seq).

    Construction canonicalizes, so two logs built from row permutations of
    the same data compare equal.
    """

    transactions: tuple[Transaction, ...]

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.transactions, key=lambda t: (t.student_id, t.seq)))
        seen: set[tuple[str, int]] = set()
        for t in ordered:
            key = (t.student_id, t.seq)
            if key in seen:
                raise ConfigError(
                    f"duplicate (student, seq) pair: ({t.student_id!r}, {t.seq})"
                )
            seen.add(key)
        object.__setattr__(self, "transactions", ordered)

    @property
    def students(self) -> tuple[str, ...]:
        return tuple(sorted({t.student_id for t in self.transactions}))

    @property
    def n_attempts(self) -> int:
        return len(self.transactions)

    def by_student(self) -> dict[str, list[Transaction]]:
        out: dict[str, list[Transaction]] = {}
        for t in self.transactions:
            out.setdefault(t.student_id, []).append(t)
        return out

    def first_attempts(self) -> "TransactionLog":
        """Keep only each student's first attempt on each question."""
        seen: set[tuple[str, str]] = set()
        kept = []
        for t in self.transactions:
            key = (t.student_id, t.question_id)
            if key not in seen:
                seen.add(key)
                kept.append(t)
        return TransactionLog(tuple(kept))

    def summary(self) -> dict[str, int]:
        return {
            "students": len(self.students),
            "attempts": self.n_attempts,
            "questions": len({t.question_id for t in self.transactions}),
        }


_TXN_HEADER = ["student_id", "question_id", "seq", "outcome"]


def load_transactions(path: str | Path, bank: QuestionBank) -> TransactionLog:
    """Load a transaction CSV and validate every row against the bank."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"transaction file not found: {path}")
    rows: list[Transaction] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"transaction file {path} is empty") from None
        if [h.strip() for h in header] != _TXN_HEADER:
            raise ConfigError(
                f"transaction file {path}: header must be "
                f"{','.join(_TXN_HEADER)!r}, got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise ConfigError(f"transactions line {lineno}: expected 4 fields")
            student, qid, seq_s, outcome_s = (cell.strip() for cell in row)
            if qid not in bank:
                raise ConfigError(
                    f"transactions line {lineno}: unknown question id {qid!r}"
                )
            try:
                seq = int(seq_s)
                outcome = int(outcome_s)
            except ValueError:
                raise ConfigError(
                    f"transactions line {lineno}: seq and outcome must be integers"
                ) from None
            if outcome not in (0, 1):
                raise ConfigError(
                    f"transactions line {lineno}: outcome must be 0 or 1"
                )
            rows.append(Transaction(student, qid, seq, outcome))
    return TransactionLog(tuple(rows))


def save_transactions(log: TransactionLog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TXN_HEADER)
        for t in log.transactions:
            writer.writerow([t.student_id, t.question_id, t.seq, t.outcome])


def load_kc_model(path: str | Path, bank: QuestionBank, name: str | None = None) -> KCModel:
    """Load a KC model CSV; the mapping must cover the bank exactly."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"KC model file not found: {path}")
    mapping: dict[str, str] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"KC model file {path} is empty") from None
        if [h.strip() for h in header] != ["question_id", "kc_label"]:
            raise ConfigError(
                f"KC model file {path}: header must be 'question_id,kc_label'"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise ConfigError(f"KC model line {lineno}: expected 2 fields")
            qid, label = row[0].strip(), row[1].strip()
            if qid in mapping:
                raise ConfigError(f"KC model line {lineno}: duplicate question id {qid!r}")
            if qid not in bank:
                raise ConfigError(f"KC model line {lineno}: unknown question id {qid!r}")
            if not label:
                raise ConfigError(f"KC model line {lineno}: empty kc label")
            mapping[qid] = label
    missing = [qid for qid in bank.ids if qid not in mapping]
    if missing:
        raise ConfigError(f"KC model {path} misses questions: {missing[:5]}")
    return KCModel(name=name or path.stem, mapping=mapping)


def save_kc_model(model: KCModel, path: str | Path, bank: QuestionBank | None = None) -> None:
    """Write a KC model CSV; rows follow bank order when a bank is given."""
    path = Path(path)
    qids = list(bank.ids) if bank is not None else sorted(model.mapping)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "kc_label"])
        for qid in qids:
            writer.writerow([qid, model.mapping[qid]])
