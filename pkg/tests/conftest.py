import random

import pytest

from fedledger.crypto import Keyring


@pytest.fixture
def rng():
    return random.Random(0xFED)


@pytest.fixture
def keyring(rng):
    return Keyring(rng)
