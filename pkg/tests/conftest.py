import numpy as np
import pytest

from sthash.config import TrainConfig
from sthash.scene import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """16x16, 3 frames, 2 train + 1 test cameras: fast enough for unit tests."""
    spec = SyntheticSpec(
        scene="orbiter", n_train_cameras=2, n_test_cameras=1,
        width=16, height=16, n_times=3, oracle_samples=96,
    )
    out = tmp_path_factory.mktemp("micro_ds")
    return generate_synthetic(spec, out, np.random.default_rng(0))


def micro_config(**overrides) -> TrainConfig:
    base = dict(
        steps=3, batch_rays=32, n_samples=12, n_coarse=8,
        levels=2, features_per_level=2,
        log2_table_size_3d=10, log2_table_size_4d=10,
        base_resolution=4, max_resolution=16,
        time_base_resolution=2, time_max_resolution=4,
        mask_resolution=8, uncertainty_resolution=8,
        hidden_dim=16, geo_features=7, sh_degree=2,
        proposal_resolution=8, proposal_time_channels=2,
        mine_hidden=16, mine_batch=64,
        log_every=1,
    )
    base.update(overrides)
    return TrainConfig(**base)
