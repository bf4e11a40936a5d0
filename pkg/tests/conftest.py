import numpy as np
import pytest
import torch

from vismotor import blockworld as bw
from vismotor import dataset as ds
from vismotor.kinematics import load_arm
from vismotor.model import NetworkConfig, SharedVisuomotorNet
from vismotor.scene import framed_camera

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def arm():
    return load_arm()


@pytest.fixture(scope="session")
def camera():
    return framed_camera()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, arm, camera):
    """6 layouts x 5 backgrounds x (1 + 1) variants."""
    layouts = [bw.sample_layout(100 + i, max_blocks=5) for i in range(6)]
    out = tmp_path_factory.mktemp("small_ds")
    m = ds.build_dataset(layouts, range(5), 1, camera, arm, out, seed=3, distractor_backgrounds=[0, 2])
    return m, layouts


@pytest.fixture
def tiny_config():
    return NetworkConfig(backbone_widths=(8, 16, 16), stem_width=8, fpn_channels=16, head_convs=1,
                         encoder_width=16, encoder_heads=2, encoder_layers=1, semantic_node_units=8)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return SharedVisuomotorNet(tiny_config)


def random_boxes(rng, n, size=100.0, min_wh=2.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(min_wh, size / 2, (n, 2))
    return np.hstack([xy, xy + wh])
