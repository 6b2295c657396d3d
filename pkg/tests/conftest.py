import numpy as np
import pytest

from fmtnet.filter import init_model
from fmtnet.models import CameraIntrinsics, NetConfig, SequenceKind
from fmtnet.synthdata import generate_dataset

TINY_SIZE = 24


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    # 24x24 frames, 6x6 features: the smallest grid the depth gradient loss accepts
    return NetConfig(
        height=TINY_SIZE,
        width=TINY_SIZE,
        class_count=3,
        stem_width=4,
        encoder_widths=[4, 4],
        feature_channels=4,
        pyramid_divisors=[1, 2, 3],
        pyramid_features=2,
        semantic_width=4,
        depth_width=4,
        motion_widths=[4, 4, 4],
        motion_feature_width=8,
        motion_state_width=8,
        motion_head_width=8,
        dropout=0.1,
    )


@pytest.fixture
def tiny_store(tiny_net):
    return init_model(tiny_net, seed=0)


@pytest.fixture
def tiny_intrinsics():
    return CameraIntrinsics.default_for(TINY_SIZE, TINY_SIZE)


@pytest.fixture
def tiny_dataset(tmp_path):
    root = tmp_path / "data"
    generate_dataset(str(root), train=2, test=2, seed=3, height=TINY_SIZE, width=TINY_SIZE, length=3, class_count=3)
    return str(root)


@pytest.fixture
def static_dataset(tmp_path):
    root = tmp_path / "static"
    generate_dataset(
        str(root), train=2, test=1, seed=5, height=TINY_SIZE, width=TINY_SIZE, length=3,
        class_count=3, kind=SequenceKind.STATIC,
    )
    return str(root)
