import json
import math

import numpy as np
import pytest

import kckit.backends as backends_mod
from kckit import (
    BackendError,
    BigramLM,
    CachedBackend,
    CapabilityError,
    ConfigError,
    DecodeConfig,
    RemoteBackend,
    render_question,
)
from kckit.backends import tokenize

from .oracles import RefBigram, ref_beam_best


def quant(x: float) -> float:
    """The logprob grid contract: multiples of 2^-38."""
    return math.ldexp(round(math.ldexp(x, 38)), -38)


TINY_DOCS = ["a b", "a c"]


class TestTokenize:
    def test_lowercase_whitespace_split(self):
        assert tokenize("The cat  Sat.\n on") == ["the", "cat", "sat.", "on"]

    def test_punctuation_stays_attached(self):
        assert tokenize("flexibility.") == ["flexibility."]

    def test_empty(self):
        assert tokenize("   ") == []


class TestBigramScoring:
    def test_two_doc_hand_case_exact(self):
        # Corpus "a b"/"a c": P(a|BOS) = (2+1)/(2+4), P(b|a) = (1+1)/(2+4).
        lm = BigramLM(TINY_DOCS)
        assert lm.cond_logprob("", "a b") == quant(math.log(1 / 2)) + quant(
            math.log(1 / 3)
        )

    def test_unknown_word_maps_to_unk(self):
        lm = BigramLM(TINY_DOCS)
        # P(<unk>|BOS) = (0+1)/(2+4)
        assert lm.cond_logprob("", "zzz") == quant(math.log(1 / 6))

    def test_prompt_counts_adapt_the_model(self):
        # Prompt "a b a" contributes cache counts (a,b):1, (b,a):1, so
        # P(b|a) = (1+1+1)/(2+1+4) = 3/7 instead of the trained 1/3.
        lm = BigramLM(TINY_DOCS)
        assert lm.cond_logprob("a b a", "b") == quant(math.log(3 / 7))

    def test_continuation_updates_the_cache_as_consumed(self):
        # After scoring "a" from prompt "a b", the (b, a) pair joins the
        # cache, then "b" sees both the trained and the prompt (a, b) pair.
        lm = BigramLM(TINY_DOCS)
        expected = quant(math.log(1 / 4)) + quant(math.log(3 / 7))
        assert lm.cond_logprob("a b", "a b") == expected

    def test_bos_pairs_never_cached(self):
        # An empty prompt scores the first token from BOS; the (BOS, tok)
        # pair must not enter the cache, so a repeat of the same word sees
        # only trained counts plus in-continuation cache.
        lm = BigramLM(TINY_DOCS)
        # "a a": P(a|BOS)=3/6 then P(a|a)=(0+0+1)/(2+0+4)
        assert lm.cond_logprob("", "a a") == quant(math.log(1 / 2)) + quant(
            math.log(1 / 6)
        )

    def test_matches_fraction_reference_on_random_pairs(self, toy, toy_lm):
        ref = RefBigram([render_question(q) for q in toy])
        rng = np.random.default_rng(7)
        texts = [render_question(q) for q in toy]
        for _ in range(100):
            a, b = rng.integers(0, len(texts), 2)
            prompt = texts[a]
            continuation = texts[b]
            got = toy_lm.cond_logprob(prompt, continuation)
            want = ref.logprob(prompt, continuation)
            assert got == pytest.approx(want, abs=1e-9)

    def test_chain_rule_exact_over_splits(self, toy, toy_lm):
        rng = np.random.default_rng(11)
        texts = [render_question(q) for q in toy]
        for _ in range(200):
            a, b = rng.integers(0, len(texts), 2)
            prompt = texts[a]
            toks = texts[b].split()
            k = int(rng.integers(1, len(toks)))
            c1 = " ".join(toks[:k])
            c2 = " ".join(toks[k:])
            whole = toy_lm.cond_logprob(prompt, c1 + " " + c2)
            parts = toy_lm.cond_logprob(prompt, c1) + toy_lm.cond_logprob(
                prompt + " " + c1, c2
            )
            assert whole == parts

    def test_next_token_distribution_sums_to_one(self):
        lm = BigramLM(TINY_DOCS)
        for prompt in ["", "a", "a b", "b a c", "zzz unknown"]:
            total = sum(
                math.exp(lm.cond_logprob(prompt, v)) for v in lm.vocabulary
            )
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_empty_continuation_rejected(self):
        lm = BigramLM(TINY_DOCS)
        with pytest.raises(ConfigError):
            lm.cond_logprob("a", "   ")

    def test_empty_corpus_rejected(self):
        with pytest.raises(ConfigError):
            BigramLM([])
        with pytest.raises(ConfigError):
            BigramLM(["   ", ""])

    def test_fingerprint_distinguishes_corpora_and_modes(self):
        a = BigramLM(TINY_DOCS)
        b = BigramLM(["a b", "a d"])
        c = BigramLM(TINY_DOCS, memoryless=True)
        assert a.fingerprint == BigramLM(TINY_DOCS).fingerprint
        assert a.fingerprint != b.fingerprint
        assert a.fingerprint != c.fingerprint


class TestMemoryless:
    def test_prompt_independence(self, toy, toy_lm):
        null = BigramLM([render_question(q) for q in toy], memoryless=True)
        texts = [render_question(q) for q in toy][:5]
        for t in texts:
            base = null.cond_logprob("", t)
            for p in texts:
                assert null.cond_logprob(p, t) == base

    def test_unigram_values(self):
        null = BigramLM(TINY_DOCS, memoryless=True)
        # P(a) = (2+1)/(4+4), P(b) = (1+1)/(4+4), regardless of prompt
        assert null.cond_logprob("c b", "a") == quant(math.log(3 / 8))
        assert null.cond_logprob("", "b") == quant(math.log(1 / 4))


class TestGenerate:
    def test_greedy_hand_case(self):
        lm = BigramLM(["the cat sat."])
        text, score = lm.generate("the", DecodeConfig(beam_size=1, max_tokens=4))
        assert text == "cat sat"
        # Two steps of (1+1)/(1+4), normalized by length 2.
        assert score == pytest.approx(math.log(2 / 5), abs=1e-9)

    def test_stop_character_truncates_output(self):
        lm = BigramLM(["the concept of flexibility."])
        text, _ = lm.generate("the concept of", DecodeConfig(beam_size=1))
        assert text == "flexibility"

    def test_wide_beam_matches_exhaustive_search(self):
        docs = ["u v w.", "u v x.", "v w u."]
        lm = BigramLM(docs)
        ref = RefBigram(docs)
        cfg = DecodeConfig(beam_size=400, max_tokens=3, length_penalty=1.0)
        got_text, got_score = lm.generate("u", cfg)
        want_text, want_score = ref_beam_best(
            ref, "u", lm.vocabulary[:-1], max_tokens=3, length_penalty=1.0
        )
        assert got_text == want_text
        assert got_score == pytest.approx(want_score, abs=1e-9)

    def test_wide_beam_matches_exhaustive_search_penalized(self):
        docs = ["p q. r", "p r s", "q s p."]
        lm = BigramLM(docs)
        ref = RefBigram(docs)
        cfg = DecodeConfig(beam_size=400, max_tokens=3, length_penalty=0.5)
        got = lm.generate("p", cfg)
        want = ref_beam_best(
            ref, "p", lm.vocabulary[:-1], max_tokens=3, length_penalty=0.5
        )
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1], abs=1e-9)

    def test_length_cap_without_stop_tokens(self):
        lm = BigramLM(["x y z x y"])
        text, _ = lm.generate("x", DecodeConfig(beam_size=1, max_tokens=3))
        assert len(text.split()) == 3

    def test_deterministic(self, toy_lm):
        cfg = DecodeConfig(beam_size=3, max_tokens=5)
        assert toy_lm.generate("What is", cfg) == toy_lm.generate("What is", cfg)

    def test_decode_config_validation(self):
        with pytest.raises(ConfigError):
            DecodeConfig(beam_size=0)
        with pytest.raises(ConfigError):
            DecodeConfig(max_tokens=0)
        with pytest.raises(ConfigError):
            DecodeConfig(length_penalty=-0.1)

    def test_stop_chars_normalized_to_frozenset(self):
        cfg = DecodeConfig(stop_chars=[".", ";"])
        assert cfg.stop_chars == frozenset({".", ";"})


class TestEmbed:
    def test_normalized_histogram(self):
        lm = BigramLM(TINY_DOCS)
        # vocabulary order is sorted: a, b, c
        vec = lm.embed(["a a b"])[0]
        assert np.allclose(vec, [2 / 3, 1 / 3, 0.0])
        assert vec.sum() == pytest.approx(1.0)

    def test_unknown_words_skipped(self):
        lm = BigramLM(TINY_DOCS)
        vec = lm.embed(["a zzz"])[0]
        assert np.allclose(vec, [1.0, 0.0, 0.0])

    def test_all_unknown_rejected(self):
        lm = BigramLM(TINY_DOCS)
        with pytest.raises(ConfigError):
            lm.embed(["zzz www"])

    def test_markers_do_not_change_histograms(self):
        lm = BigramLM(TINY_DOCS)
        plain = lm.embed(["a b c"])[0]
        marked = lm.embed(["a b c"], markers=["Exercise 1:\n"])[0]
        assert np.array_equal(plain, marked)


class TestCachedBackend:
    def test_miss_then_hit(self, tmp_path):
        inner = BigramLM(TINY_DOCS)
        cached = CachedBackend(inner, tmp_path / "cache.jsonl")
        first = cached.cond_logprob("a", "b")
        second = cached.cond_logprob("a", "b")
        assert first == second == inner.cond_logprob("a", "b")
        assert (cached.hits, cached.misses) == (1, 1)

    def test_persists_across_instances(self, tmp_path):
        inner = BigramLM(TINY_DOCS)
        path = tmp_path / "cache.jsonl"
        CachedBackend(inner, path).cond_logprob("a", "b c")
        reopened = CachedBackend(inner, path)
        assert reopened.cond_logprob("a", "b c") == inner.cond_logprob("a", "b c")
        assert (reopened.hits, reopened.misses) == (1, 0)

    def test_differential_against_inner(self, tmp_path, toy, toy_lm):
        cached = CachedBackend(toy_lm, tmp_path / "cache.jsonl")
        texts = [render_question(q) for q in toy][:6]
        pairs = [(p, c) for p in texts for c in texts]
        direct = [toy_lm.cond_logprob(p, c) for p, c in pairs]
        via_cache_cold = [cached.cond_logprob(p, c) for p, c in pairs]
        via_cache_warm = [cached.cond_logprob(p, c) for p, c in pairs]
        assert direct == via_cache_cold == via_cache_warm

    def test_key_depends_on_model_fingerprint(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        a = CachedBackend(BigramLM(TINY_DOCS), path)
        a.cond_logprob("a", "b")
        # Same file, different corpus: must not reuse the stored value.
        b = CachedBackend(BigramLM(["a b b b", "a c"]), path)
        got = b.cond_logprob("a", "b")
        assert b.misses == 1
        assert got == BigramLM(["a b b b", "a c"]).cond_logprob("a", "b")

    def test_corrupt_lines_dropped_and_file_rewritten(self, tmp_path):
        inner = BigramLM(TINY_DOCS)
        path = tmp_path / "cache.jsonl"
        first = CachedBackend(inner, path)
        keep = first.cond_logprob("a", "b")
        with path.open("a", encoding="utf-8") as fh:
            fh.write("not json at all\n")
            fh.write('{"k": "missing-lp"}\n')
        reopened = CachedBackend(inner, path)
        assert reopened.cond_logprob("a", "b") == keep
        assert reopened.hits == 1
        lines = [l for l in path.read_text().splitlines() if l.strip()]
        assert len(lines) == 1
        assert json.loads(lines[0])["lp"] == keep

    def test_passthrough_generate_embed_fingerprint(self, tmp_path):
        inner = BigramLM(TINY_DOCS)
        cached = CachedBackend(inner, tmp_path / "c.jsonl")
        assert cached.generate("a") == inner.generate("a")
        assert np.array_equal(cached.embed(["a b"])[0], inner.embed(["a b"])[0])
        assert cached.fingerprint == inner.fingerprint
        assert cached.concept_stub == inner.concept_stub

    def test_debug_text_sidecar(self, tmp_path):
        cached = CachedBackend(
            BigramLM(TINY_DOCS), tmp_path / "c.jsonl", debug_text=True
        )
        cached.cond_logprob("a", "b")
        side = tmp_path / "c.jsonl.debug"
        rec = json.loads(side.read_text().splitlines()[0])
        assert rec["prompt"] == "a"
        assert rec["continuation"] == "b"


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("not json")
        return self._payload


class FakeSession:
    """Scripted stand-in for an HTTP session: pops one response per call."""

    def __init__(self, script):
        self.script = list(script)
        self.headers = {}
        self.calls = []

    def get(self, url, timeout=None):
        self.calls.append(("GET", url, None))
        return self._next()

    def post(self, url, json=None, timeout=None):
        self.calls.append(("POST", url, json))
        return self._next()

    def _next(self):
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


CAPS = {"generate": True, "embed": True, "model": "test"}


def make_remote(monkeypatch, script, token=None):
    import requests

    session = FakeSession([FakeResponse(payload=CAPS)] + list(script))
    monkeypatch.setattr(requests, "Session", lambda: session)
    monkeypatch.setattr(backends_mod.time, "sleep", lambda s: None)
    remote = RemoteBackend("http://unit.test/", token=token)
    return remote, session


class TestRemoteBackend:
    def test_capabilities_fetched_on_init(self, monkeypatch):
        remote, session = make_remote(monkeypatch, [])
        assert session.calls[0] == ("GET", "http://unit.test/v1/capabilities", None)
        assert remote.can_generate and remote.can_embed
        # fingerprint is a stable digest of the capability payload
        again, _ = make_remote(monkeypatch, [])
        assert remote.fingerprint == again.fingerprint

    def test_token_sets_auth_header(self, monkeypatch):
        _, session = make_remote(monkeypatch, [], token="sekrit")
        assert session.headers["Authorization"] == "Bearer sekrit"

    def test_cond_logprob_roundtrip(self, monkeypatch):
        remote, session = make_remote(
            monkeypatch, [FakeResponse(payload={"logprob": -1.25})]
        )
        assert remote.cond_logprob("p", "c") == -1.25
        method, url, payload = session.calls[-1]
        assert (method, url) == ("POST", "http://unit.test/v1/cond_logprob")
        assert payload == {"prompt": "p", "continuation": "c"}

    def test_batch_roundtrip(self, monkeypatch):
        remote, session = make_remote(
            monkeypatch, [FakeResponse(payload={"logprobs": [-1.0, -2.0]})]
        )
        got = remote.cond_logprob_batch([("p1", "c1"), ("p2", "c2")])
        assert got == [-1.0, -2.0]
        assert session.calls[-1][2] == {
            "items": [
                {"prompt": "p1", "continuation": "c1"},
                {"prompt": "p2", "continuation": "c2"},
            ]
        }

    def test_client_error_fails_fast(self, monkeypatch):
        remote, session = make_remote(
            monkeypatch, [FakeResponse(status_code=422, text="bad request")]
        )
        with pytest.raises(BackendError, match="422"):
            remote.cond_logprob("p", "c")
        assert len(session.calls) == 2  # capabilities + exactly one attempt

    def test_server_errors_retried_then_succeed(self, monkeypatch):
        remote, session = make_remote(
            monkeypatch,
            [
                FakeResponse(status_code=503),
                FakeResponse(status_code=500),
                FakeResponse(payload={"logprob": -0.5}),
            ],
        )
        assert remote.cond_logprob("p", "c") == -0.5
        assert len(session.calls) == 4

    def test_gives_up_after_retry_budget(self, monkeypatch):
        remote, session = make_remote(
            monkeypatch, [FakeResponse(status_code=500)] * 10
        )
        with pytest.raises(BackendError, match="giving up"):
            remote.cond_logprob("p", "c")
        assert len(session.calls) == 2 + RemoteBackend.RETRIES

    def test_connection_errors_retried(self, monkeypatch):
        import requests

        remote, _ = make_remote(
            monkeypatch,
            [
                requests.ConnectionError("refused"),
                FakeResponse(payload={"logprob": -3.0}),
            ],
        )
        assert remote.cond_logprob("p", "c") == -3.0

    def test_non_json_success_is_an_error(self, monkeypatch):
        remote, _ = make_remote(monkeypatch, [FakeResponse(payload=None)])
        with pytest.raises(BackendError, match="not JSON"):
            remote.cond_logprob("p", "c")

    def test_generate_respects_capability_flag(self, monkeypatch):
        import requests

        caps = {"generate": False, "embed": False}
        session = FakeSession([FakeResponse(payload=caps)])
        monkeypatch.setattr(requests, "Session", lambda: session)
        remote = RemoteBackend("http://unit.test")
        with pytest.raises(CapabilityError):
            remote.generate("p")
        with pytest.raises(CapabilityError):
            remote.embed(["t"])

    def test_generate_and_embed_payloads(self, monkeypatch):
        remote, session = make_remote(
            monkeypatch,
            [
                FakeResponse(payload={"text": "flexibility", "score": -1.5}),
                FakeResponse(payload={"vectors": [[1.0, 2.0]]}),
            ],
        )
        text, score = remote.generate("p", DecodeConfig(beam_size=2, max_tokens=8))
        assert (text, score) == ("flexibility", -1.5)
        gen_payload = session.calls[-1][2]
        assert gen_payload["beam_size"] == 2
        assert gen_payload["max_tokens"] == 8
        assert gen_payload["stop_chars"] == [",", "."]
        vecs = remote.embed(["t"], markers=["m"])
        assert np.array_equal(vecs[0], [1.0, 2.0])
        assert session.calls[-1][2] == {"texts": ["t"], "markers": ["m"]}
