import pytest

from kckit import BigramLM, oracle_bank, toy_bank


@pytest.fixture(scope="session")
def toy():
    return toy_bank()


@pytest.fixture(scope="session")
def tiny():
    return oracle_bank()


@pytest.fixture(scope="session")
def toy_lm(toy):
    return BigramLM.from_bank(toy)


@pytest.fixture(scope="session")
def tiny_lm(tiny):
    return BigramLM.from_bank(tiny)
