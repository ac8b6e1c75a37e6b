import numpy as np
import pytest
import torch

from lgtse.data import SourceBank, build_corpus

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """16/4/4 synthetic corpus shared by the training and CLI tests."""
    root = tmp_path_factory.mktemp("corpus")
    bank = SourceBank.synthetic(speakers_per_split=(4, 2, 2), utterances_per_speaker=3, seed=5)
    manifests = build_corpus(bank, root, n_train=16, n_dev=4, n_test=4, seed=5)
    return root, manifests


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(results, key=str):
        status, detail = results[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
