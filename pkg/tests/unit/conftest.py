import hypothesis
import pytest

from smoothing_lab.smoothing import UGrid

hypothesis.settings.register_profile("lab", max_examples=10, deadline=None)
hypothesis.settings.load_profile("lab")


@pytest.fixture(scope="session")
def grid() -> UGrid:
    return UGrid.default()
