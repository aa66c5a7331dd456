import numpy as np
import pytest

from salsearch.dataset import AttributeSchema, Binary, Exclusive, SynthBenchConfig, generate_synth_benchmark


@pytest.fixture
def schema():
    return AttributeSchema((Binary("hat"), Exclusive("age", ("young", "adult", "old")), Binary("bag")))


@pytest.fixture(scope="session")
def small_bench():
    cfg = SynthBenchConfig(num_seen_categories=8, num_unseen_categories=4, samples_per_category_range=(4, 6),
                           raw_dim=8, seed=3)
    return generate_synth_benchmark(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
