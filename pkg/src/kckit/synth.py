"""Deterministic toy corpus and synthetic response generators.

The toy bank is forty hand-written multiple-choice questions over five
small topics with deliberately overlapping within-topic vocabulary, so
text-overlap affinities have real structure to find. Synthetic response
logs are sampled from the same additive factor model the fitter assumes,
which makes parameter-recovery tests meaningful: the generator returns the
ground-truth parameters alongside the log.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit

from .bank import Choice, Question, QuestionBank, Transaction, TransactionLog
from .errors import ConfigError
from .kcmodel import KCModel
from .seeding import spawn_rng

_MC = "Multiple Choice"


def _q(qid: str, topic: str, stem: str, answer: str, wrong: list[str]) -> Question:
    labels = "ABCD"
    bodies = [answer] + wrong
    choices = tuple(Choice(labels[i], b) for i, b in enumerate(bodies))
    return Question(
        id=qid,
        qtype=_MC,
        stem=stem,
        choices=choices,
        answer_label="A",
        expert_kc=topic,
    )


def toy_bank() -> QuestionBank:
    """Forty questions, eight per topic, fixed order and content."""
    qs = [
        # fractions
        _q("frac-01", "fractions", "What fraction of a pizza is one slice out of four equal slices?",
           "one fourth", ["one half", "one third"]),
        _q("frac-02", "fractions", "Which fraction is equal to one half?",
           "two fourths", ["two thirds", "three fourths"]),
        _q("frac-03", "fractions", "What is the sum of one fourth and one fourth?",
           "one half", ["one fourth", "two thirds"]),
        _q("frac-04", "fractions", "Which fraction is larger, one third or one fourth?",
           "one third", ["one fourth", "they are equal"]),
        _q("frac-05", "fractions", "What is one half of one half?",
           "one fourth", ["one half", "one eighth"]),
        _q("frac-06", "fractions", "How many fourths make a whole pizza?",
           "four", ["two", "three"]),
        _q("frac-07", "fractions", "Which fraction of the pizza is left after eating one fourth?",
           "three fourths", ["one half", "two fourths"]),
        _q("frac-08", "fractions", "What is the simplest form of the fraction two fourths?",
           "one half", ["two fourths", "one fourth"]),
        # photosynthesis
        _q("photo-01", "photosynthesis", "What gas do plants absorb during photosynthesis?",
           "carbon dioxide", ["oxygen", "nitrogen"]),
        _q("photo-02", "photosynthesis", "What gas do plants release during photosynthesis?",
           "oxygen", ["carbon dioxide", "hydrogen"]),
        _q("photo-03", "photosynthesis", "What pigment makes leaves green and captures light?",
           "chlorophyll", ["carotene", "melanin"]),
        _q("photo-04", "photosynthesis", "Where in the plant cell does photosynthesis happen?",
           "chloroplast", ["nucleus", "mitochondria"]),
        _q("photo-05", "photosynthesis", "What sugar do plants make during photosynthesis?",
           "glucose", ["sucrose", "starch"]),
        _q("photo-06", "photosynthesis", "Besides light and carbon dioxide, what do plants need for photosynthesis?",
           "water", ["soil", "oxygen"]),
        _q("photo-07", "photosynthesis", "What energy source drives photosynthesis in green plants?",
           "sunlight", ["heat", "wind"]),
        _q("photo-08", "photosynthesis", "Through which leaf openings does carbon dioxide enter the plant?",
           "stomata", ["roots", "veins"]),
        # gravity
        _q("grav-01", "gravity", "What force pulls a dropped ball toward the ground?",
           "gravity", ["friction", "magnetism"]),
        _q("grav-02", "gravity", "Does gravity pull objects toward or away from the earth?",
           "toward", ["away", "sideways"]),
        _q("grav-03", "gravity", "If you drop a ball on the moon, does gravity still pull it down?",
           "yes", ["no", "only at night"]),
        _q("grav-04", "gravity", "Is the pull of gravity stronger on the earth or on the moon?",
           "the earth", ["the moon", "they are equal"]),
        _q("grav-05", "gravity", "What keeps the moon in orbit around the earth?",
           "gravity", ["wind", "light"]),
        _q("grav-06", "gravity", "A heavy ball and a light ball are dropped together; which hits the ground first in a vacuum?",
           "both together", ["the heavy ball", "the light ball"]),
        _q("grav-07", "gravity", "What do we call the force of gravity acting on an object's mass?",
           "weight", ["volume", "speed"]),
        _q("grav-08", "gravity", "As a ball falls toward the ground, does its speed increase or decrease?",
           "increase", ["decrease", "stay the same"]),
        # punctuation
        _q("punct-01", "punctuation", "Which mark ends a question?",
           "question mark", ["period", "comma"]),
        _q("punct-02", "punctuation", "Which mark ends a simple statement sentence?",
           "period", ["question mark", "colon"]),
        _q("punct-03", "punctuation", "Which mark separates items in a list inside a sentence?",
           "comma", ["period", "apostrophe"]),
        _q("punct-04", "punctuation", "Which mark shows strong feeling at the end of a sentence?",
           "exclamation point", ["comma", "semicolon"]),
        _q("punct-05", "punctuation", "Which mark shows that letters are missing in a contraction?",
           "apostrophe", ["hyphen", "comma"]),
        _q("punct-06", "punctuation", "Which mark introduces a list after a complete sentence?",
           "colon", ["apostrophe", "period"]),
        _q("punct-07", "punctuation", "Which marks enclose the exact words a speaker says?",
           "quotation marks", ["parentheses", "commas"]),
        _q("punct-08", "punctuation", "Which mark joins two related complete sentences without a conjunction?",
           "semicolon", ["apostrophe", "question mark"]),
        # triangles
        _q("tri-01", "triangles", "How many sides does a triangle have?",
           "three", ["four", "five"]),
        _q("tri-02", "triangles", "What is the sum of the interior angles of a triangle in degrees?",
           "180", ["90", "360"]),
        _q("tri-03", "triangles", "What do we call a triangle with all three sides equal?",
           "equilateral", ["isosceles", "scalene"]),
        _q("tri-04", "triangles", "What do we call a triangle with exactly two sides equal?",
           "isosceles", ["equilateral", "scalene"]),
        _q("tri-05", "triangles", "What do we call a triangle with no equal sides?",
           "scalene", ["isosceles", "equilateral"]),
        _q("tri-06", "triangles", "A triangle with one angle of 90 degrees is called what?",
           "right triangle", ["acute triangle", "obtuse triangle"]),
        _q("tri-07", "triangles", "In a right triangle, what do we call the longest side?",
           "hypotenuse", ["base", "leg"]),
        _q("tri-08", "triangles", "Can a triangle have two angles of 90 degrees?",
           "no", ["yes", "only if isosceles"]),
    ]
    return QuestionBank(tuple(qs))


def oracle_bank() -> QuestionBank:
    """Five tiny questions with heavy word overlap.

    Small enough that closed-form probability arithmetic over the builtin
    backend stays tractable, with enough shared vocabulary that every
    pairwise affinity is informative.
    """
    qs = [
        _q("ob-1", "pets", "the cat sat on the mat", "a cat", ["a dog"]),
        _q("ob-2", "pets", "the dog sat on the rug", "a dog", ["a cat"]),
        _q("ob-3", "pets", "the cat chased the dog", "a chase", ["a nap"]),
        _q("ob-4", "nature", "birds fly over the mat", "wings", ["paws"]),
        _q("ob-5", "nature", "fish swim in the sea", "water", ["sand"]),
    ]
    return QuestionBank(tuple(qs))


@dataclass(frozen=True)
class SynthTruth:
    """Ground-truth parameters behind a sampled log."""

    theta: dict[str, float]
    beta: dict[str, float]
    gamma: dict[str, float]
    kc_model: KCModel


def synth_log(
    bank: QuestionBank,
    kc_model: KCModel,
    n_students: int = 50,
    rounds: int = 2,
    seed: int = 0,
    theta_sd: float = 1.0,
    beta_low: float = -1.0,
    beta_high: float = 1.0,
    gamma_low: float = 0.05,
    gamma_high: float = 0.6,
) -> tuple[TransactionLog, SynthTruth]:
    """Sample Bernoulli outcomes from a known additive factor model.

    Each student works through a private shuffle of the bank once per
    round; practice counts accumulate across rounds, so learning-rate
    effects are observable. All randomness flows from ``seed``.
    """
    if n_students < 1 or rounds < 1:
        raise ConfigError("synth_log needs n_students >= 1 and rounds >= 1")
    for qid in bank.ids:
        if qid not in kc_model.mapping:
            raise ConfigError(f"KC model {kc_model.name!r} does not cover {qid!r}")
    rng = spawn_rng(seed, "synth-params")
    students = [f"s{i:03d}" for i in range(n_students)]
    kcs = sorted(set(kc_model.mapping.values()))
    theta = {s: float(v) for s, v in zip(students, rng.normal(0.0, theta_sd, n_students))}
    beta = {k: float(v) for k, v in zip(kcs, rng.uniform(beta_low, beta_high, len(kcs)))}
    gamma = {k: float(v) for k, v in zip(kcs, rng.uniform(gamma_low, gamma_high, len(kcs)))}
    order_rng = spawn_rng(seed, "synth-order")
    outcome_rng = spawn_rng(seed, "synth-outcomes")
    qids = list(bank.ids)
    txns: list[Transaction] = []
    for s in students:
        seq = 0
        practiced: dict[str, int] = {}
        for _ in range(rounds):
            for qi in order_rng.permutation(len(qids)):
                qid = qids[int(qi)]
                kc = kc_model.mapping[qid]
                t = practiced.get(kc, 0)
                z = theta[s] + beta[kc] + gamma[kc] * t
                y = int(outcome_rng.random() < expit(z))
                txns.append(Transaction(student_id=s, question_id=qid, seq=seq, outcome=y))
                practiced[kc] = t + 1
                seq += 1
    return (
        TransactionLog(tuple(txns)),
        SynthTruth(theta=theta, beta=beta, gamma=gamma, kc_model=kc_model),
    )


def toy_transactions(bank: QuestionBank | None = None) -> TransactionLog:
    """The bundled demo log (regenerable via ``python -m kckit.synth``)."""
    from .bank import load_transactions

    bank = bank or toy_bank()
    ref = resources.files("kckit").joinpath("data/toy_transactions.csv")
    with resources.as_file(ref) as path:
        return load_transactions(path, bank)


def load_toy_bank_file() -> QuestionBank:
    """The bundled bank file; must match :func:`toy_bank` exactly."""
    from .bank import load_bank

    ref = resources.files("kckit").joinpath("data/toy_bank.jsonl")
    with resources.as_file(ref) as path:
        return load_bank(path)


def write_toy_data(out_dir: str | Path) -> tuple[Path, Path]:
    """Regenerate the bundled data files. Deterministic."""
    from .bank import save_bank, save_transactions

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bank = toy_bank()
    bank_path = out / "toy_bank.jsonl"
    save_bank(bank, bank_path)
    log, _ = synth_log(bank, bank.expert_model(), n_students=30, rounds=2, seed=7)
    txn_path = out / "toy_transactions.csv"
    save_transactions(log, txn_path)
    return bank_path, txn_path


if __name__ == "__main__":  # pragma: no cover
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "src/kckit/data"
    paths = write_toy_data(target)
    print("\n".join(str(p) for p in paths))
