"""Scoring backends: log-probability scoring, generation, and embedding.

Every consumer in the toolkit talks to a backend through three operations:

* ``cond_logprob(prompt, continuation)`` -- natural-log probability of the
  continuation text given the prompt text, summed over continuation tokens.
* ``generate(prompt, config)`` -- beam-searched continuation with stop
  characters and length-penalty ranking.
* ``embed(texts, markers=None)`` -- one vector per text; backends that
  support it average only content tokens when a marker prefix is supplied.

Three implementations live here: a deterministic builtin n-gram model used
for tests and offline runs, an append-only persistent cache wrapper, and an
HTTP client for a remote scoring server.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BackendError, CapabilityError, ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeConfig:
    """Beam-search settings. Defaults match the concept-extraction recipe."""

    beam_size: int = 5
    length_penalty: float = 1.0
    stop_chars: frozenset[str] = frozenset({".", ","})
    max_tokens: int = 24

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if self.length_penalty < 0:
            raise ConfigError("length_penalty must be >= 0")
        object.__setattr__(self, "stop_chars", frozenset(self.stop_chars))


class ScoringBackend:
    """Interface all backends implement. Capability flags gate optional ops."""

    can_score: bool = True
    can_generate: bool = False
    can_embed: bool = False
    # Set by backends whose generate() is too weak to name concepts; the
    # concept extractor then falls back to its corpus-statistics stub.
    concept_stub: bool = False

    @property
    def fingerprint(self) -> str:
        raise NotImplementedError

    def cond_logprob(self, prompt: str, continuation: str) -> float:
        raise NotImplementedError

    def generate(self, prompt: str, config: DecodeConfig | None = None) -> tuple[str, float]:
        raise CapabilityError(f"{type(self).__name__} cannot generate")

    def embed(self, texts: Sequence[str], markers: Sequence[str] | None = None) -> list[np.ndarray]:
        raise CapabilityError(f"{type(self).__name__} cannot embed")


def tokenize(text: str) -> list[str]:
    """Builtin tokenizer: lowercase whitespace split, punctuation attached."""
    return [w.lower() for w in text.split()]


def _clean_word(token: str) -> str:
    return token.strip("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~")


# Per-token logprobs are rounded to multiples of 2^-38. Sums of such values
# never round (while |sum| < 2^15), so chain-rule additivity over string
# splits holds as exact float equality; the rounding itself is < 4e-12 per
# token, far inside every stated tolerance.
_QUANT_BITS = 38


def _quantize(x: float) -> float:
    return math.ldexp(round(math.ldexp(x, _QUANT_BITS)), -_QUANT_BITS)


class BigramLM(ScoringBackend):
    """Word-level bigram with add-one smoothing, adapted to the prompt.

    Counts are trained once on a document corpus (normally the rendered
    question bank). When scoring, bigram counts harvested from the prompt
    text -- and from the continuation as it is consumed -- are added to the
    trained counts, so conditioning on a related exercise genuinely raises
    the continuation's probability while everything stays hand-computable
    from integer counts. The begin sentinel only ever appears as a context
    (empty prompt); the end sentinel marks document boundaries during
    training and carries no probability mass, which keeps the next-token
    distribution summing to one over words + the unknown token.

    ``memoryless=True`` degrades the model to a unigram that ignores both
    context and prompt: useful as a null model, since conditional and
    marginal scores then coincide exactly.
    """

    BOS = None  # context sentinel: "no previous word"
    UNK = "<unk>"
    EOS = "</s>"

    can_generate = True
    can_embed = True
    concept_stub = True

    def __init__(self, documents: Sequence[str], memoryless: bool = False):
        if not documents:
            raise ConfigError("builtin LM needs at least one training document")
        self.memoryless = memoryless
        words: set[str] = set()
        bigrams: Counter = Counter()
        ctx_total: Counter = Counter()
        unigrams: Counter = Counter()
        doc_freq: Counter = Counter()  # cleaned-word-pair document frequency
        n_docs = 0
        for doc in documents:
            toks = tokenize(doc)
            if not toks:
                continue
            n_docs += 1
            words.update(toks)
            prev = self.BOS
            for tok in toks:
                bigrams[(prev, tok)] += 1
                ctx_total[prev] += 1
                unigrams[tok] += 1
                prev = tok
            cleaned = [w for w in (_clean_word(t) for t in toks) if w]
            doc_freq.update({pair for pair in zip(cleaned, cleaned[1:])})
        if not words:
            raise ConfigError("builtin LM training corpus has no tokens")
        self._words: tuple[str, ...] = tuple(sorted(words))
        self._word_index = {w: i for i, w in enumerate(self._words)}
        # Event space for next-token prediction: trained words + <unk>.
        self.vocabulary: tuple[str, ...] = self._words + (self.UNK,)
        self._event_count = len(self.vocabulary)
        self._bigrams = dict(bigrams)
        self._ctx_total = dict(ctx_total)
        self._unigrams = dict(unigrams)
        self._total_tokens = sum(unigrams.values())
        self._doc_freq = dict(doc_freq)
        self._n_docs = n_docs
        self._fingerprint: str | None = None

    @classmethod
    def from_bank(cls, bank, memoryless: bool = False) -> "BigramLM":
        from .bank import render_question

        return cls([render_question(q) for q in bank], memoryless=memoryless)

    # -- scoring ------------------------------------------------------------

    def _map(self, tok: str) -> str:
        return tok if tok in self._word_index else self.UNK

    def _logprob(self, tok: str, prev, cache: Counter, cache_total: Counter) -> float:
        v = self._event_count
        if self.memoryless:
            c = self._unigrams.get(tok, 0)
            return _quantize(math.log((c + 1) / (self._total_tokens + v)))
        c = self._bigrams.get((prev, tok), 0) + cache[(prev, tok)]
        n = self._ctx_total.get(prev, 0) + cache_total[prev]
        return _quantize(math.log((c + 1) / (n + v)))

    def cond_logprob(self, prompt: str, continuation: str) -> float:
        cont = [self._map(t) for t in tokenize(continuation)]
        if not cont:
            raise ConfigError("continuation tokenizes to zero tokens")
        hist = [self._map(t) for t in tokenize(prompt)]
        cache: Counter = Counter()
        cache_total: Counter = Counter()
        for a, b in zip(hist, hist[1:]):
            cache[(a, b)] += 1
            cache_total[a] += 1
        prev = hist[-1] if hist else self.BOS
        total = 0.0
        for tok in cont:
            total += self._logprob(tok, prev, cache, cache_total)
            if prev is not self.BOS:
                cache[(prev, tok)] += 1
                cache_total[prev] += 1
            prev = tok
        return total

    # -- generation -----------------------------------------------------------

    def generate(self, prompt: str, config: DecodeConfig | None = None) -> tuple[str, float]:
        """Beam search over trained words; ``beam_size=1`` is greedy argmax.

        Candidates are ranked by cumulative logprob while searching and by
        ``logprob / len(tokens)**length_penalty`` at the end; the winning
        text is then cut before its first stop character.
        """
        cfg = config or DecodeConfig()
        hist = [self._map(t) for t in tokenize(prompt)]
        base_cache: Counter = Counter()
        base_total: Counter = Counter()
        for a, b in zip(hist, hist[1:]):
            base_cache[(a, b)] += 1
            base_total[a] += 1
        prev0 = hist[-1] if hist else self.BOS

        # beam item: (tokens, logprob, prev, cache, cache_total, finished)
        beams: list[tuple[tuple[str, ...], float, object, Counter, Counter, bool]] = [
            ((), 0.0, prev0, base_cache, base_total, False)
        ]
        for _ in range(cfg.max_tokens):
            candidates = []
            advanced = False
            for tokens, lp, prev, cache, ctot, finished in beams:
                if finished:
                    candidates.append((tokens, lp, prev, cache, ctot, True))
                    continue
                advanced = True
                for word in self._words:
                    step = self._logprob(word, prev, cache, ctot)
                    new_tokens = tokens + (word,)
                    done = any(ch in word for ch in cfg.stop_chars)
                    if done or len(new_tokens) == cfg.max_tokens:
                        candidates.append((new_tokens, lp + step, word, cache, ctot, True))
                    else:
                        new_cache = cache.copy()
                        new_ctot = ctot.copy()
                        if prev is not self.BOS:
                            new_cache[(prev, word)] += 1
                            new_ctot[prev] += 1
                        candidates.append((new_tokens, lp + step, word, new_cache, new_ctot, False))
            if not advanced:
                break
            candidates.sort(key=lambda c: (-c[1], c[0]))
            beams = candidates[: cfg.beam_size]

        def norm(lp: float, length: int) -> float:
            return lp / max(1, length) ** cfg.length_penalty

        best = min(beams, key=lambda c: (-norm(c[1], len(c[0])), c[0]))
        score = norm(best[1], len(best[0]))
        text = " ".join(best[0])
        cut = min((text.index(ch) for ch in cfg.stop_chars if ch in text), default=None)
        if cut is not None:
            text = text[:cut]
        return text.strip(), score

    # -- embedding ------------------------------------------------------------

    def embed(self, texts: Sequence[str], markers: Sequence[str] | None = None) -> list[np.ndarray]:
        """Normalized token-count histogram over the trained vocabulary.

        Marker prefixes are simply omitted: histogramming only the content
        text is exactly the marker-masked semantics. Unknown words are
        skipped; a text with no in-vocabulary token cannot be embedded.
        """
        out: list[np.ndarray] = []
        for text in texts:
            vec = np.zeros(len(self._words), dtype=np.float64)
            hits = 0
            for tok in tokenize(text):
                idx = self._word_index.get(tok)
                if idx is not None:
                    vec[idx] += 1.0
                    hits += 1
            if hits == 0:
                raise ConfigError(
                    f"cannot embed text with no in-vocabulary tokens: {text[:40]!r}"
                )
            out.append(vec / hits)
        return out

    # -- support for the concept-extraction stub ------------------------------

    def clean_tokens(self, text: str) -> list[str]:
        return [w for w in (_clean_word(t) for t in tokenize(text)) if w]

    def pair_tfidf(self, pair: tuple[str, str], tf: int) -> float:
        """tf x smoothed idf of a cleaned word pair over the training corpus."""
        df = self._doc_freq.get(pair, 0)
        return tf * (math.log((1 + self._n_docs) / (1 + df)) + 1.0)

    # -- identity --------------------------------------------------------------

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha256()
            h.update(b"bigram-lm\x00")
            h.update(str(self.memoryless).encode())
            h.update(str(_QUANT_BITS).encode())
            for (prev, tok), count in sorted(
                self._bigrams.items(), key=lambda kv: (kv[0][0] or "", kv[0][1])
            ):
                h.update(f"{prev}\x01{tok}\x01{count}\x02".encode())
            self._fingerprint = h.hexdigest()
        return self._fingerprint


class CachedBackend(ScoringBackend):
    """Persistent memo for ``cond_logprob`` over any inner backend.

    The cache is an append-only JSONL file of ``{"k": <hex>, "lp": <float>}``
    records, keyed by a SHA-256 over (inner fingerprint, prompt,
    continuation). Unreadable lines are dropped and the file is rewritten
    from the surviving records, with a warning; a corrupt cache can cost
    recomputation, never a wrong answer. Writes are serialized behind a
    lock, reads are lock-free.
    """

    def __init__(self, inner: ScoringBackend, path: str | Path, debug_text: bool = False):
        self.inner = inner
        self.path = Path(path)
        self.debug_text = debug_text
        self.can_generate = inner.can_generate
        self.can_embed = inner.can_embed
        self.concept_stub = inner.concept_stub
        self._lock = threading.Lock()
        self._store: dict[str, float] = {}
        self.hits = 0
        self.misses = 0
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        good: list[tuple[str, float]] = []
        corrupt = 0
        with self.path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = rec["k"]
                    lp = float(rec["lp"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    corrupt += 1
                    continue
                good.append((key, lp))
        self._store = dict(good)
        if corrupt:
            log.warning(
                "cache %s: dropped %d corrupt record(s); rebuilding file", self.path, corrupt
            )
            with self.path.open("w", encoding="utf-8") as fh:
                for key, lp in self._store.items():
                    fh.write(json.dumps({"k": key, "lp": lp}) + "\n")

    def _key(self, prompt: str, continuation: str) -> str:
        h = hashlib.sha256()
        h.update(self.inner.fingerprint.encode())
        h.update(b"\x00")
        h.update(prompt.encode("utf-8"))
        h.update(b"\x00")
        h.update(continuation.encode("utf-8"))
        return h.hexdigest()

    def cond_logprob(self, prompt: str, continuation: str) -> float:
        key = self._key(prompt, continuation)
        lp = self._store.get(key)
        if lp is not None:
            self.hits += 1
            return lp
        self.misses += 1
        lp = self.inner.cond_logprob(prompt, continuation)
        with self._lock:
            self._store[key] = lp
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"k": key, "lp": lp}) + "\n")
            if self.debug_text:
                side = self.path.with_suffix(self.path.suffix + ".debug")
                with side.open("a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {"k": key, "prompt": prompt, "continuation": continuation}
                        )
                        + "\n"
                    )
        return lp

    def generate(self, prompt: str, config: DecodeConfig | None = None) -> tuple[str, float]:
        return self.inner.generate(prompt, config)

    def embed(self, texts: Sequence[str], markers: Sequence[str] | None = None) -> list[np.ndarray]:
        return self.inner.embed(texts, markers)

    @property
    def fingerprint(self) -> str:
        # Observationally the same model as the inner backend.
        return self.inner.fingerprint

    # Pass through stub support when the inner backend provides it.
    def clean_tokens(self, text: str) -> list[str]:
        return self.inner.clean_tokens(text)  # type: ignore[attr-defined]

    def pair_tfidf(self, pair: tuple[str, str], tf: int) -> float:
        return self.inner.pair_tfidf(pair, tf)  # type: ignore[attr-defined]


class RemoteBackend(ScoringBackend):
    """HTTP client for a scoring sidecar.

    Protocol: ``GET /v1/capabilities`` plus ``POST /v1/cond_logprob``,
    ``/v1/cond_logprob_batch``, ``/v1/generate`` and ``/v1/embed``.
    Transient failures are retried three times with exponential backoff
    before surfacing as :class:`BackendError`.
    """

    RETRIES = 3
    BACKOFF = 0.5  # seconds; doubles per retry

    def __init__(self, base_url: str, token: str | None = None, timeout: float = 60.0):
        import requests

        self._requests = requests
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()
        if token:
            self._session.headers["Authorization"] = f"Bearer {token}"
        caps = self._call("GET", "/v1/capabilities")
        self.capabilities = caps
        self.can_generate = bool(caps.get("generate"))
        self.can_embed = bool(caps.get("embed"))
        self._fingerprint = hashlib.sha256(
            json.dumps(caps, sort_keys=True).encode("utf-8")
        ).hexdigest()

    def _call(self, method: str, route: str, payload: dict | None = None) -> dict:
        url = self.base_url + route
        delay = self.BACKOFF
        last: Exception | None = None
        for attempt in range(self.RETRIES + 1):
            resp = None
            try:
                if method == "GET":
                    resp = self._session.get(url, timeout=self.timeout)
                else:
                    resp = self._session.post(url, json=payload, timeout=self.timeout)
            except (self._requests.ConnectionError, self._requests.Timeout) as exc:
                last = BackendError(f"{route}: {exc}")
            if resp is not None:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError:
                        raise BackendError(f"{route}: response is not JSON") from None
                if resp.status_code < 500:
                    # Client errors are deterministic; retrying cannot help.
                    raise BackendError(
                        f"{route}: rejected with {resp.status_code}: {resp.text[:200]}"
                    )
                last = BackendError(f"{route}: server error {resp.status_code}")
            if attempt < self.RETRIES:
                time.sleep(delay)
                delay *= 2
        raise BackendError(f"{route}: giving up after {self.RETRIES + 1} attempts: {last}")

    def cond_logprob(self, prompt: str, continuation: str) -> float:
        out = self._call(
            "POST", "/v1/cond_logprob", {"prompt": prompt, "continuation": continuation}
        )
        return float(out["logprob"])

    def cond_logprob_batch(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        out = self._call(
            "POST",
            "/v1/cond_logprob_batch",
            {"items": [{"prompt": p, "continuation": c} for p, c in pairs]},
        )
        return [float(x) for x in out["logprobs"]]

    def generate(self, prompt: str, config: DecodeConfig | None = None) -> tuple[str, float]:
        if not self.can_generate:
            raise CapabilityError("remote backend does not support generation")
        cfg = config or DecodeConfig()
        out = self._call(
            "POST",
            "/v1/generate",
            {
                "prompt": prompt,
                "beam_size": cfg.beam_size,
                "length_penalty": cfg.length_penalty,
                "stop_chars": sorted(cfg.stop_chars),
                "max_tokens": cfg.max_tokens,
            },
        )
        return str(out["text"]), float(out["score"])

    def embed(self, texts: Sequence[str], markers: Sequence[str] | None = None) -> list[np.ndarray]:
        if not self.can_embed:
            raise CapabilityError("remote backend does not support embedding")
        payload: dict = {"texts": list(texts)}
        if markers is not None:
            payload["markers"] = list(markers)
        out = self._call("POST", "/v1/embed", payload)
        return [np.asarray(v, dtype=np.float64) for v in out["vectors"]]

    @property
    def fingerprint(self) -> str:
        return self._fingerprint
