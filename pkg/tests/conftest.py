import pytest

from kspace.dataset import prepare_dataset
from kspace.features import FeatureConfig
from kspace.synthetic import LeakageSpec, generate

TINY_FEATURES = FeatureConfig(d_enc=16, buckets=8, time_pairs=2, rwpe_steps=4, walks=10, fanout=(4, 2))


def tiny_dataset(seed=0, **spec):
    kw = dict(users=160, items=20, interactions=900, seed=seed)
    kw.update(spec)
    bundle, truth = generate(LeakageSpec(**kw))
    return prepare_dataset(bundle, TINY_FEATURES, rng_seed=seed), truth


@pytest.fixture(scope="session")
def tiny():
    return tiny_dataset()[0]
