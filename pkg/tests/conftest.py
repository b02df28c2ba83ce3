import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs_setup():
    """Small 2-class blob problem with a trained trajectory and 2 clusters per class."""
    from ddm import datahub, nets, trainer
    data = datahub.make_blobs(2, 40, 6, 4.0, 0, subclusters=2, sub_separation=3.0)
    spec = nets.ModelSpec((6,), 2, widths=(8,))
    h = datahub.cluster(data, datahub.embed(data), 2, 0)
    cfg = trainer.TrainConfig(lr=0.1, epochs=25, batch_size=16)
    traj = trainer.train(spec, data, cfg)
    return data, spec, h, cfg, traj
