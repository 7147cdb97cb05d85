"""Model plumbing behind the HTTP routes.

Three operations, all on one causal language model loaded at startup:

* ``score``: sum of next-token log-probabilities of a continuation given
  a prompt. Prompt and continuation are tokenized separately and scored
  in a single forward pass over the concatenation, with prompt positions
  excluded from the sum. This is the masked-loss construction; it never
  re-tokenizes across the prompt/continuation boundary, so two-pass
  subtraction artifacts cannot appear.
* ``generate``: deterministic beam search with stop strings and a
  length-penalty-normalized final ranking.
* ``embed``: mean of the last hidden states, optionally restricted to
  the content tokens when a marker prefix is supplied per text.

Every method is thread-safe: forward passes are serialized behind a
lock, and an admission semaphore bounds how many requests may wait for
it at once.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterator, Sequence

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from .config import ServerConfig


class BadRequest(ValueError):
    """Caller error no retry can fix; maps to HTTP 400."""


class OverLength(ValueError):
    """Input does not fit the model's context window; maps to HTTP 413."""


class Busy(RuntimeError):
    """All admission slots are taken; maps to HTTP 503."""


class ModelRunner:
    """Owns the tokenizer and model and serializes access to them."""

    # How long a request may wait for an admission slot before 503.
    BUSY_TIMEOUT = 30.0

    def __init__(self, config: ServerConfig):
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model)
        self.model = AutoModelForCausalLM.from_pretrained(config.model)
        self.model.to(config.device)
        self.model.eval()
        mc = self.model.config
        self.hidden_size = int(mc.hidden_size)
        self.max_positions = int(getattr(mc, "max_position_embeddings", 0) or 2**31)
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_batch_size)

    @contextmanager
    def admit(self) -> Iterator[None]:
        """Hold one admission slot; raise Busy when none frees up in time."""
        if not self._slots.acquire(timeout=self.BUSY_TIMEOUT):
            raise Busy("all request slots are busy")
        try:
            yield
        finally:
            self._slots.release()

    # -- tokenization helpers --------------------------------------------------

    def _encode(self, text: str) -> list[int]:
        return self.tokenizer(text, add_special_tokens=False)["input_ids"]

    def _context_ids(self, prompt: str) -> list[int]:
        """Token ids conditioning the first scored/generated position.

        An empty prompt still needs one position for the model to predict
        from, so it falls back to the BOS (or EOS) token.
        """
        ids = self._encode(prompt)
        if ids:
            return ids
        fallback = self.tokenizer.bos_token_id
        if fallback is None:
            fallback = self.tokenizer.eos_token_id
        if fallback is None:
            raise BadRequest("prompt is empty and the tokenizer has no BOS/EOS token")
        return [fallback]

    def _check_length(self, n_tokens: int) -> None:
        if n_tokens > self.max_positions:
            raise OverLength(
                f"{n_tokens} tokens exceed the model's context window "
                f"of {self.max_positions}"
            )

    def _forward_logits(self, ids: list[int]) -> torch.Tensor:
        x = torch.tensor([ids], dtype=torch.long, device=self.config.device)
        with self._lock, torch.inference_mode():
            return self.model(input_ids=x).logits[0].float()

    # -- scoring ---------------------------------------------------------------

    def score(self, prompt: str, continuation: str) -> float:
        """Natural-log probability of ``continuation`` given ``prompt``.

        Sum over continuation tokens only; each term is log-softmax of the
        true next token, so the result is always <= 0.
        """
        ids_c = self._encode(continuation)
        if not ids_c:
            raise BadRequest("continuation tokenizes to zero tokens")
        ids_p = self._context_ids(prompt)
        self._check_length(len(ids_p) + len(ids_c))
        logits = self._forward_logits(ids_p + ids_c)
        logprobs = torch.log_softmax(logits, dim=-1)
        total = 0.0
        for k, tid in enumerate(ids_c):
            total += float(logprobs[len(ids_p) + k - 1, tid])
        return total

    def score_many(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        """Order-aligned scores via the exact single-request code path.

        Items run one forward pass each rather than as a padded batch;
        padding changes float accumulation order, and the batch route is
        contractually bit-equal to sequential scalar calls.
        """
        return [self.score(p, c) for p, c in pairs]

    # -- generation ------------------------------------------------------------

    def generate(
        self,
        prompt: str,
        beam_size: int = 5,
        length_penalty: float = 1.0,
        stop_chars: Sequence[str] = (".", ","),
        max_tokens: int = 24,
    ) -> tuple[str, float]:
        """Deterministic beam search continuation of ``prompt``.

        Beams are ranked by cumulative log-probability while searching and
        by ``logprob / n_tokens**length_penalty`` at the end; the winning
        text is cut before its first stop string and stripped. With
        ``beam_size=1`` every step keeps only the argmax token, which is
        plain greedy decoding.
        """
        if beam_size < 1:
            raise BadRequest("beam_size must be >= 1")
        if max_tokens < 1:
            raise BadRequest("max_tokens must be >= 1")
        if length_penalty < 0:
            raise BadRequest("length_penalty must be >= 0")
        if any(not s for s in stop_chars):
            raise BadRequest("stop_chars entries must be non-empty strings")
        context = self._context_ids(prompt)
        self._check_length(len(context) + max_tokens)

        # Beam state: (generated ids, cumulative logprob, finished).
        beams: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)]
        top_k = min(beam_size, int(self.model.config.vocab_size))
        for _ in range(max_tokens):
            if all(done for _, _, done in beams):
                break
            candidates: list[tuple[tuple[int, ...], float, bool]] = []
            for gen, lp, done in beams:
                if done:
                    candidates.append((gen, lp, True))
                    continue
                logits = self._forward_logits(context + list(gen))[-1]
                step = torch.log_softmax(logits, dim=-1)
                vals, idxs = torch.topk(step, top_k)
                for v, tid in zip(vals.tolist(), idxs.tolist()):
                    new = gen + (tid,)
                    text = self.tokenizer.decode(list(new))
                    finished = (
                        any(s in text for s in stop_chars) or len(new) >= max_tokens
                    )
                    candidates.append((new, lp + v, finished))
            candidates.sort(key=lambda c: (-c[1], c[0]))
            beams = candidates[:beam_size]

        def norm(lp: float, length: int) -> float:
            return lp / max(1, length) ** length_penalty

        best = min(beams, key=lambda c: (-norm(c[1], len(c[0])), c[0]))
        text = self.tokenizer.decode(list(best[0]))
        cut = min((text.index(s) for s in stop_chars if s in text), default=None)
        if cut is not None:
            text = text[:cut]
        return text.strip(), norm(best[1], len(best[0]))

    # -- embedding -------------------------------------------------------------

    def embed(
        self, texts: Sequence[str], markers: Sequence[str] | None = None
    ) -> list[list[float]]:
        """One mean-pooled last-hidden-state vector per text.

        With ``markers`` the i-th text is conditioned on its marker prefix
        but only the content positions are averaged, so boilerplate framing
        does not wash out what the text itself says.
        """
        if not texts:
            raise BadRequest("texts must be a non-empty list")
        if markers is not None and len(markers) != len(texts):
            raise BadRequest("markers must align one-to-one with texts")
        out: list[list[float]] = []
        for i, text in enumerate(texts):
            ids_m = self._encode(markers[i]) if markers is not None else []
            ids_t = self._encode(text)
            if not ids_t:
                raise BadRequest(f"texts[{i}] tokenizes to zero tokens")
            self._check_length(len(ids_m) + len(ids_t))
            x = torch.tensor(
                [ids_m + ids_t], dtype=torch.long, device=self.config.device
            )
            with self._lock, torch.inference_mode():
                states = self.model(
                    input_ids=x, output_hidden_states=True
                ).hidden_states[-1][0]
            vec = states[len(ids_m) :].float().mean(dim=0)
            out.append(vec.tolist())
        return out
