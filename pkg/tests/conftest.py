import pytest

from ovps.embedstore import generate_synthetic_world


@pytest.fixture(scope="session")
def small_world():
    """A fast world shared by read-only tests: 4 base + 2 novel, dim 16."""
    return generate_synthetic_world(
        n_base=4, n_novel=2, dim=16, n_images=30, noise_sigma=0.1, seed=7
    )
