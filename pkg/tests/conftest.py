import numpy as np
import pytest
import torch

from mdmbench import dataio

# Tiny tensors everywhere; intra-op threading only slows the suite down.
torch.set_num_threads(1)

SMALL_RGB_HW = (84, 112)
SMALL_STEREO_HW = (63, 84)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """Four small rendered samples shared across IO/CLI/model tests."""
    root = tmp_path_factory.mktemp("dataset")
    for i in range(4):
        dataio.generate_sample(
            str(root / f"sample_{i:05d}"), f"sample_{i:05d}", seed=1000 + i,
            rgb_hw=SMALL_RGB_HW, stereo_hw=SMALL_STEREO_HW,
        )
    return root


def random_valid_depth(rng, h=32, w=40, lo=0.5, hi=8.0):
    return rng.uniform(lo, hi, (h, w)).astype(np.float32)
