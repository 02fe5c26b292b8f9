import numpy as np
import pytest
import torch

from ridgealign import TOY, init_weights, synth
from ridgealign.numkit import DTYPE


@pytest.fixture(scope="session")
def toy_weights():
    return init_weights(TOY, seed=0)


@pytest.fixture(scope="session")
def toy_pair():
    img = synth.ridge_image(32, 32, 5)
    return synth.warped_pair(img, 6, max_disp=3.0)


@pytest.fixture(scope="session")
def toy_pair_tensors(toy_pair):
    return (torch.as_tensor(toy_pair.image_a, dtype=DTYPE),
            torch.as_tensor(toy_pair.image_b, dtype=DTYPE))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def trained_weights():
    """Briefly trained toy weights, good enough to register synthetic pairs."""
    from ridgealign import losses
    fixtures = [synth.warped_pair(synth.ridge_image(64, 64, i), 100 + i,
                                  max_disp=5.0) for i in range(3)]
    _, trained = losses.train_toy(fixtures, init_weights(TOY, seed=0), TOY,
                                  steps=60, lr=0.02)
    return trained


@pytest.fixture(scope="session")
def trained_weights_file(trained_weights, tmp_path_factory):
    p = tmp_path_factory.mktemp("weights") / "toy.rwa"
    trained_weights.save(p)
    return p
