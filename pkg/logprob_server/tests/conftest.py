"""Shared fixtures: a tiny seeded causal LM with a character tokenizer.

The contract under test is model-agnostic, so the suite runs against a
randomly initialized two-layer model whose tokenizer maps every printable
character to one token. Character tokenization is compositional (ids of a
concatenation are the concatenated ids), which makes every string split a
token boundary; the reference-model tests are the only ones that need real
weights and they skip unless LOGPROB_SERVER_REFERENCE_MODEL is set.
"""

from __future__ import annotations

import os
import socket
import string
import threading
import time

os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")

import pytest
import torch
import uvicorn
from fastapi.testclient import TestClient
from tokenizers import Regex, Tokenizer, decoders, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

from logprob_server import ServerConfig, create_app

REFERENCE_ENV = "LOGPROB_SERVER_REFERENCE_MODEL"

TINY_HIDDEN = 32
TINY_CONTEXT = 1024


def build_char_tokenizer() -> PreTrainedTokenizerFast:
    """Every printable character is its own token; decode is plain concat."""
    vocab = {"[UNK]": 0, "<|bos|>": 1}
    for ch in sorted(set(string.printable)):
        vocab[ch] = len(vocab)
    tok = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Split(Regex("[\\s\\S]"), behavior="isolated")
    tok.decoder = decoders.Fuse()
    return PreTrainedTokenizerFast(
        tokenizer_object=tok,
        unk_token="[UNK]",
        bos_token="<|bos|>",
        eos_token="<|bos|>",
    )


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory) -> str:
    """Save the tokenizer plus a seeded random tiny model as one directory."""
    d = tmp_path_factory.mktemp("tiny-model")
    tokenizer = build_char_tokenizer()
    tokenizer.save_pretrained(d)
    config = GPT2Config(
        vocab_size=len(tokenizer),
        n_positions=TINY_CONTEXT,
        n_embd=TINY_HIDDEN,
        n_layer=2,
        n_head=4,
        bos_token_id=tokenizer.bos_token_id,
        eos_token_id=tokenizer.eos_token_id,
    )
    torch.manual_seed(20240)
    GPT2LMHeadModel(config).eval().save_pretrained(d)
    return str(d)


@pytest.fixture(scope="session")
def app(model_dir):
    return create_app(ServerConfig(model=model_dir, max_batch_size=4))


@pytest.fixture(scope="session")
def client(app) -> TestClient:
    return TestClient(app)


@pytest.fixture(scope="session")
def live_server(model_dir):
    """Real uvicorn instance on a local port, for tests that need sockets."""
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    app = create_app(ServerConfig(model=model_dir, max_batch_size=4, port=port))
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 30
    while not server.started:
        if time.time() > deadline or not thread.is_alive():
            raise RuntimeError("test server failed to start")
        time.sleep(0.05)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=10)


@pytest.fixture(scope="session")
def reference_client() -> TestClient:
    """Server over the real reference model; skips when it is not available."""
    model = os.environ.get(REFERENCE_ENV)
    if not model:
        pytest.skip(
            f"set {REFERENCE_ENV} to the reference model's path or identifier "
            "to run golden tests against real weights"
        )
    return TestClient(create_app(ServerConfig(model=model)))
