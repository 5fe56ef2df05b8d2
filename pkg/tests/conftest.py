import numpy as np
import pytest

from blockprune.blocks import zero_branch
from blockprune.data import Dataset, split, synth_dataset
from blockprune.rng import Rng
from blockprune.tensor import Tensor, no_grad
from blockprune.trainer import preset_config, train
from blockprune.zoo import build_network, forward, preset_spec


@pytest.fixture(scope="session")
def desk_data():
    ds = synth_dataset(4, 256, (3, 16, 16), seed=0)
    return split(ds, (0.8, 0.2), seed=0)


@pytest.fixture(scope="session")
def _trained_desk(desk_data):
    train_ds, val_ds = desk_data
    net = build_network(preset_spec("desk"), 0)
    report = train(net, train_ds, val_ds, preset_config("desk", seed=0))
    return net, report


@pytest.fixture
def trained_desk(_trained_desk):
    """The desk net after 30 seeded epochs on the synthetic set (a fresh copy per test)."""
    net, report = _trained_desk
    return net.copy(), report


@pytest.fixture
def small_val(desk_data):
    return desk_data[1].subset(np.arange(64))


def plant_identity(net, index, val_ds):
    """Zero the residual branch of block ``index`` (making it relu(x) = x on the post-relu stream)
    and relabel ``val_ds`` with the planted net's own predictions, so base accuracy is exactly 1
    and any other removal is scored by how many predictions it flips."""
    zero_branch(net.block(index))
    with no_grad():
        labels = np.argmax(forward(net, Tensor(val_ds.images)).data, axis=1)
    return net, Dataset(val_ds.images, labels, val_ds.num_classes, "val")


def fresh_desk(seed=0):
    return build_network(preset_spec("desk"), Rng(seed))


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
