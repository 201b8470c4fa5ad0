import numpy as np
import pytest

from llflow.config import RunConfig
from llflow.data import SynthSpec, load_pair_dataset, synth_generate
from llflow.diagnostics import small_config
from llflow.model import random_model


def fd_grad(f, arr, idx, step=1e-6):
    """Central finite difference of scalar f() wrt one element of arr."""
    flat = arr.reshape(-1)
    base = flat[idx]
    flat[idx] = base + step
    hi = f()
    flat[idx] = base - step
    lo = f()
    flat[idx] = base
    return (hi - lo) / (2 * step)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small synthetic paired corpus shared by unit tests."""
    root = tmp_path_factory.mktemp("toy") / "corpus"
    synth_generate(SynthSpec(count=24, size=16, seed=11), str(root))
    return str(root)


@pytest.fixture(scope="session")
def toy_pairs(toy_corpus):
    return load_pair_dataset(toy_corpus)


@pytest.fixture
def tiny_model():
    cfg = small_config(levels=1, steps=2)
    return cfg, random_model(cfg, np.random.default_rng(3))


def quick_train_config(root, iters=300):
    """A very small but trainable configuration for fast integration tests."""
    cfg = RunConfig()
    cfg.model.levels = 2
    cfg.model.steps_per_level = 2
    cfg.model.width = 16
    cfg.model.hidden = 16
    cfg.model.rrdb_blocks = 2
    cfg.model.rrdb_growth = 8
    cfg.train.patch_size = 16
    cfg.train.batch_size = 4
    cfg.train.total_iters = iters
    cfg.train.checkpoint_every = 0
    cfg.train.seed = 5
    cfg.data.root = root
    return cfg


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
