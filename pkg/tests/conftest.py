import numpy as np
import pytest
import torch

from tergan.networks import NetworkSpec, build_networks

torch.set_num_threads(1)


def tiny_spec(**kw):
    """32px networks with every width divided by 8."""
    base = dict(image_size=32, n_expressions=6, n_identities=20)
    base.update(kw)
    return NetworkSpec(**base).scaled(8)


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def nets(spec):
    return build_networks(spec, seed=0).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria record one line each here; printed in the terminal summary
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
