import pytest

from havc_exporter import TinyVlmAdapter


@pytest.fixture(scope="session")
def adapter() -> TinyVlmAdapter:
    """One frozen model for the whole session; construction is seeded."""
    return TinyVlmAdapter()
