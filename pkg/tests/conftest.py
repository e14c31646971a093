import pytest

from bayeseg.tensor import clear_tape


@pytest.fixture(autouse=True)
def fresh_tape():
    """Recorded-but-unreplayed ops in one test must not leak into the next."""
    clear_tape()
    yield
    clear_tape()
