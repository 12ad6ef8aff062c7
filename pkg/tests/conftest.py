import numpy as np
import pytest

from gaitcaps import data
from gaitcaps.config import TrainConfig

# A deliberately small model so training-path tests run in seconds.
TINY = dict(conv_spec="c4k3p1,P,c4k3p1,P,c8k3p1", bin_dim=8, hidden=8, n_caps=3,
            caps_dim=8, n_digit=4, digit_dim=4, conv_caps_kernels=4,
            pretrain_steps=3, train_steps=3, p=2, k=2, frames_per_sample=3, lr=1e-3)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(**TINY)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """8 identities x 2 views, NM x 4 and BG/CL x 1, 4 frames per sequence."""
    root = tmp_path_factory.mktemp("synth")
    data.synth_dataset(root, 8, [0, 90], {"nm": 4, "bg": 1, "cl": 1}, frames_per_seq=4, seed=3)
    return root


@pytest.fixture(scope="session")
def synth_index(synth_root):
    return data.load_dataset(synth_root)


def make_sequence(identity, cond, num, view, n_frames=2, seed=0):
    r = np.random.default_rng(seed)
    frames = (r.random((n_frames, 64, 64)) > 0.5).astype(np.uint8)
    return data.GaitSequence(identity, cond, num, view, frames)
