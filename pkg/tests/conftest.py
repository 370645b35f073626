import asyncio

import numpy as np
import pytest

from balancedfmm.datasets import GeneratorSpec, generate
from balancedfmm.geometry import SourceSet


def run_async(coroutine):
    return asyncio.run(coroutine)


@pytest.fixture
def uniform_sources():
    def make(n: int, seed: int = 0) -> SourceSet:
        return generate(GeneratorSpec("uniform", n, seed))
    return make


@pytest.fixture(scope="module")
def thousand_points() -> SourceSet:
    return generate(GeneratorSpec("uniform", 1000, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
