import math
import string

import pytest

from kckit import (
    BigramLM,
    ConceptLabel,
    ConfigError,
    EmptyGenerationError,
    KckitError,
    concept_prompt,
    extract_all,
    extract_concept,
    load_concepts,
    render_question,
    save_concepts,
)
from kckit.backends import tokenize

from .test_bank import make_q


class TestConceptPrompt:
    def test_exact_bytes(self):
        q = make_q(stem="Which material shows flexibility?")
        assert concept_prompt(q) == (
            "Exercise 1:\n"
            "Multiple Choice:\n"
            "Which material shows flexibility?\n"
            "A) bending\n"
            "B) melting\n"
            "Answer: A) bending\n"
            "\n"
            "Remark:\n"
            "The above exercise is a multiple-choice question "
            "that tests whether the student understands the concept of "
        )

    def test_qtype_lowercased_and_hyphenated(self):
        q = make_q(qtype="Short Answer")
        # single-choice non-MCQ is allowed; rebuild with one choice
        assert "is a short-answer question" in concept_prompt(q)

    def test_ends_with_trailing_space(self):
        assert concept_prompt(make_q()).endswith("concept of ")


class TestConceptLabel:
    def test_rejects_stop_characters(self):
        with pytest.raises(ConfigError):
            ConceptLabel("q1", "one. two", 0.5)
        with pytest.raises(ConfigError):
            ConceptLabel("q1", "a,b", 0.5)

    def test_rejects_empty(self):
        with pytest.raises(EmptyGenerationError):
            ConceptLabel("q1", "   ", 0.5)


def ref_stub_label(bank, q):
    """Independent tf-idf pick: best adjacent cleaned stem word pair."""
    def clean(text):
        return [
            w for w in (t.strip(string.punctuation) for t in tokenize(text)) if w
        ]

    docs = [clean(render_question(x)) for x in bank]
    n_docs = len(docs)
    words = clean(q.stem)
    pairs = list(zip(words, words[1:]))
    if not pairs:
        return words[0]
    tf = {}
    for p in pairs:
        tf[p] = tf.get(p, 0) + 1
    best, best_score = None, -math.inf
    for p in pairs:
        if any(ch in p[0] + p[1] for ch in ".,"):
            continue
        df = sum(1 for d in docs if p in set(zip(d, d[1:])))
        score = tf[p] * (math.log((1 + n_docs) / (1 + df)) + 1.0)
        if score > best_score:
            best, best_score = p, score
    return f"{best[0]} {best[1]}"


class TestStubExtraction:
    def test_matches_reference_on_toy_bank(self, toy, toy_lm):
        for qid in ["frac-01", "photo-03", "grav-05", "punct-02", "tri-07"]:
            q = toy.by_id(qid)
            got = extract_concept(q, toy_lm)
            assert got.question_id == qid
            assert got.label == ref_stub_label(toy, q)

    def test_single_word_stem_falls_back_to_word(self):
        q = make_q("one", stem="Photosynthesis?")
        lm = BigramLM([render_question(q)])
        assert extract_concept(q, lm).label == "photosynthesis"

    def test_label_is_stop_free_and_lowercase(self, toy, toy_lm):
        for q in toy:
            label = extract_concept(q, toy_lm).label
            assert label == label.lower()
            assert "." not in label and "," not in label


class FakeGenerativeBackend:
    """Minimal non-stub backend: returns scripted generations."""

    can_generate = True
    can_embed = False
    concept_stub = False
    fingerprint = "fake"

    def __init__(self, reply="Flexibility."):
        self.reply = reply
        self.calls = 0

    def cond_logprob(self, prompt, continuation):
        raise AssertionError("not used")

    def generate(self, prompt, config=None):
        self.calls += 1
        return self.reply, -1.5

    def embed(self, texts, markers=None):
        raise AssertionError("not used")


class TestGenerativeExtraction:
    def test_sanitizes_generation(self):
        q = make_q()
        backend = FakeGenerativeBackend("  Flexibility.  ")
        got = extract_concept(q, backend)
        assert got.label == "flexibility"
        assert got.score == -1.5

    def test_empty_generation_raises(self):
        q = make_q()
        backend = FakeGenerativeBackend(" .,. ")
        with pytest.raises(EmptyGenerationError):
            extract_concept(q, backend)

    def test_failures_aggregate_after_one_retry_each(self, tiny):
        backend = FakeGenerativeBackend(" . ")
        with pytest.raises(KckitError, match="5 question"):
            extract_all(tiny, backend)
        assert backend.calls == 2 * len(tiny)


class TestExtractAll:
    def test_bank_order_and_coverage(self, tiny, tiny_lm):
        got = extract_all(tiny, tiny_lm)
        assert tuple(got) == tiny.ids

    def test_parallel_equals_sequential(self, tiny, tiny_lm):
        seq = extract_all(tiny, tiny_lm, jobs=1)
        par = extract_all(tiny, tiny_lm, jobs=4)
        assert seq == par

    def test_resume_reuses_stored_labels(self, tiny, tiny_lm, tmp_path):
        path = tmp_path / "concepts.csv"
        first = extract_all(tiny, tiny_lm, resume_path=path)
        assert tuple(first) == tiny.ids
        # poison one stored label: a resumed run must keep it verbatim
        poisoned = dict(first)
        poisoned["ob-1"] = ConceptLabel("ob-1", "poisoned label", 9.0)
        save_concepts(poisoned, path)
        again = extract_all(tiny, tiny_lm, resume_path=path)
        assert again["ob-1"].label == "poisoned label"
        assert again["ob-2"] == first["ob-2"]

    def test_resume_appends_only_missing(self, tiny, tiny_lm, tmp_path):
        path = tmp_path / "concepts.csv"
        partial = dict(list(extract_all(tiny, tiny_lm).items())[:3])
        save_concepts(partial, path)
        extract_all(tiny, tiny_lm, resume_path=path)
        rows = path.read_text().strip().splitlines()
        assert len(rows) == 1 + len(tiny)  # header + one row per question

    def test_resume_ignores_foreign_ids(self, tiny, tiny_lm, tmp_path):
        path = tmp_path / "concepts.csv"
        save_concepts({"ghost": ConceptLabel("ghost", "spooky", 1.0)}, path)
        got = extract_all(tiny, tiny_lm, resume_path=path)
        assert "ghost" not in got
        assert tuple(got) == tiny.ids

    def test_jobs_validation(self, tiny, tiny_lm):
        with pytest.raises(ConfigError):
            extract_all(tiny, tiny_lm, jobs=0)


class TestConceptIO:
    def test_roundtrip_exact(self, tiny, tiny_lm, tmp_path):
        concepts = extract_all(tiny, tiny_lm)
        path = tmp_path / "c.csv"
        save_concepts(concepts, path)
        assert load_concepts(path) == concepts

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_concepts(tmp_path / "nope.csv")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_concepts(path)
