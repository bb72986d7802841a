import numpy as np
import pytest

from interdistill.encoder import EncoderModel


@pytest.fixture
def small_model():
    """A 32-bucket, 4-dim encoder so gradient checks stay cheap."""
    rng = np.random.default_rng(7)
    return EncoderModel(rng.uniform(-0.5, 0.5, size=(32, 4)))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
