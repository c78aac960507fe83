import pytest

from wsloc.model import default_registry


@pytest.fixture(scope="session")
def registry():
    return default_registry()
