import numpy as np
import pytest
import torch

from ddeq import net
from ddeq.autodiff import DTYPE


def tiny_config(**kw):
    base = dict(data_dim=2, latent_dim=8, bilinear_dim=4, per_head_dim=4,
                cross_encoder_layers=1, self_encoder_layers=1)
    base.update(kw)
    return net.ModelConfig(**base)


def randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    return net.init_params(tiny_config(num_classes=3, coupling=True), seed=3)


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if passed else 'FAIL'}  {title}: {detail}")
