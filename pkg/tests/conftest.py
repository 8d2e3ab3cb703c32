import pytest

from testutil import random_image


@pytest.fixture
def img():
    return random_image(7)
