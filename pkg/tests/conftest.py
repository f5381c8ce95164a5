import hypothesis
import pytest

from cluttershape.templates import template_library

hypothesis.settings.register_profile(
    "suite", deadline=None, max_examples=50, derandomize=True
)
hypothesis.settings.load_profile("suite")


@pytest.fixture(scope="session")
def templates():
    return template_library()
