import numpy as np
import pytest

from mapsr.synth import SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_scene():
    return generate_scene(SceneSpec(H=64, W=64, C=4, D=8, patch=8, n_regions=12, lr_factor=1, seed=7))


@pytest.fixture(scope="session")
def noisy_scene():
    return generate_scene(
        SceneSpec(H=64, W=64, C=3, D=8, patch=8, n_regions=10, embed_noise=2.0, image_noise=0.1,
                  lr_factor=8, label_flip_rate=0.1, seed=3)
    )
