import numpy as np
import pytest

from armkit import labeling, simenv
from armkit.armmodel import ArmConfig, ArmModel
from armkit.simenv import SimConfig
from armkit.trajdata import EpisodeStore


def tiny_sim_config() -> SimConfig:
    # 4 stages x 20 units = 80 progressive steps end to end
    return SimConfig(num_stages=4, max_steps=260, advance_delta=0.05,
                     regress_prob=0.3, regress_depth=0.06, stagnate_prob=0.2,
                     feature_dim=16, proprio_dim=9, noise_std=0.05,
                     projection_seed=5)


def tiny_arm_config(**overrides) -> ArmConfig:
    base = dict(window=5, stride=4, width=32, layers=1, heads=4,
                d_vis=16, d_state=9, vocab_size=2, batch_size=16,
                lr=1e-3, train_steps=300, warmup_frac=0.05)
    base.update(overrides)
    return ArmConfig(**base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_sim_config()


@pytest.fixture(scope="session")
def tiny_store(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("tiny_store")
    store = EpisodeStore.create(root)
    spec = {"expert": 6, "sluggish": 2, "error_recovery": 3, "failure": 3,
            "dagger_fragment": 2}
    for ep in simenv.gen_dataset(spec, 77, tiny_cfg):
        store.write_episode(ep)
    return store


@pytest.fixture(scope="session")
def tiny_labels(tiny_store):
    return labeling.label_dataset_oracle(tiny_store, stride=4)


@pytest.fixture(scope="session")
def random_model():
    config = tiny_arm_config()
    return ArmModel(config, np.random.default_rng(123))


@pytest.fixture(scope="session")
def tiny_trained(tiny_store, tiny_labels):
    from armkit.armmodel import train
    config = tiny_arm_config()
    return train(config, tiny_store, tiny_labels, seed=11, steps=1500)
