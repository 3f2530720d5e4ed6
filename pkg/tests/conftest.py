import numpy as np
import pytest
import torch

from egopack.backbone import BackboneConfig
from egopack.data import SyntheticConfig, generate_synthetic
from egopack.graphs import build_task_graphs, default_task_specs
from egopack.prototypes import build_banks
from egopack.training import TrainConfig, train_mtl

TINY = dict(n_videos=12, actions_per_video=12, n_verbs=6, n_nouns=5, D=16,
            state_change_verbs=(0, 2, 4), rows_per_action=4, clips_per_video=3)
TINY_GRAPHS = {"LTA": {"Z": 4}, "PNR": {"n_subsegments": 4}}
BACKPACK = ("AR", "LTA", "PNR")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(SyntheticConfig(seed=3, **TINY))


@pytest.fixture(scope="session")
def tiny_specs(tiny_data):
    return default_task_specs(tiny_data.n_verbs, tiny_data.n_nouns, **TINY_GRAPHS)


@pytest.fixture(scope="session")
def tiny_graphs(tiny_data, tiny_specs):
    return {split: {t: build_task_graphs(tiny_data, s, split) for t, s in tiny_specs.items()}
            for split in ("train", "val")}


def tiny_train_config(**kw):
    opts = dict(epochs={"AR": 2, "LTA": 2, "OSCC": 2, "PNR": 2}, lr=1e-3, warmup_epochs=1,
                batch_size=8, seed=0)
    opts.update(kw)
    return TrainConfig(**opts)


def tiny_backbone(D=16, **kw):
    return BackboneConfig(**{"L": 2, "D": D, "D_t": 16, **kw})


@pytest.fixture(scope="session")
def tiny_mtl(tiny_specs, tiny_graphs):
    return train_mtl({t: tiny_specs[t] for t in BACKPACK}, tiny_graphs["train"],
                     tiny_train_config(), tiny_backbone())


@pytest.fixture(scope="session")
def tiny_banks(tiny_mtl, tiny_graphs):
    return build_banks(tiny_mtl.model, tiny_graphs["train"]["AR"])
