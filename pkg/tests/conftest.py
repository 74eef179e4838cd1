import logging
import sys

import numpy as np
import pytest

from vtrig.synthgen import SynthConfig, generate

logging.getLogger("vtrig").setLevel(logging.ERROR)


def same_data_trace(n_cps=51, noise_sigma=0.0, seed=0, **kw):
    cfg = SynthConfig(n_cps=n_cps, repeats_per_plaintext=n_cps, noise_sigma=noise_sigma, seed=seed, **kw)
    return cfg, *generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
