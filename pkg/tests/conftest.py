import pytest

from cfslbench import synth_generate


@pytest.fixture(scope="session")
def class_pool():
    """30 classes x 8 samples at 20px: enough for most classification tasks."""
    return synth_generate(30, 8, image_size=20, seed=0)


@pytest.fixture(scope="session")
def instance_pool():
    """Few classes with many samples, for instance-mode tasks up to NI=20."""
    return synth_generate(8, 22, image_size=20, seed=1)
