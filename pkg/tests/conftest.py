import numpy as np
import pytest

from cutgen.dataio import TOY_CATEGORY, DatasetSpec, load_split, make_toy_dataset
from cutgen.diffusion import ToyBackbone, ToyBackboneConfig, linear_schedule


@pytest.fixture(scope="session")
def backbone20():
    return ToyBackbone(ToyBackboneConfig(T=20), schedule=linear_schedule(20))


@pytest.fixture(scope="session")
def backbone50():
    return ToyBackbone(ToyBackboneConfig(T=50), schedule=linear_schedule(50))


@pytest.fixture(scope="session")
def prompt20(backbone20):
    return backbone20.build_prompt("A photo of a [cls] that is damaged", "disk", "damaged")


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyds")
    make_toy_dataset(root, n_normal=6, n_anomalous=6, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_train_samples(toy_root):
    spec = DatasetSpec(root=toy_root, layout="toy", categories=(TOY_CATEGORY,), split="train")
    return list(load_split(spec))


@pytest.fixture(scope="session")
def toy_test_samples(toy_root):
    spec = DatasetSpec(root=toy_root, layout="toy", categories=(TOY_CATEGORY,), split="test")
    return list(load_split(spec))


@pytest.fixture(scope="session")
def disk_image(toy_train_samples):
    return toy_train_samples[0].image


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
