import os

# Keep unit-test numerics single-threaded and reproducible; must happen
# before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from cnerf import autodiff as ad
from cnerf.field import FieldConfig, FieldParameters
from cnerf.render import RenderSettings
from cnerf.scene import generate_dataset
from cnerf.train import RayBank, TrainConfig, TrainState, train_step


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from acceptance_util import RESULTS

    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, passed, detail in RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")


@pytest.fixture(autouse=True)
def finite_checks():
    prev = ad.set_finite_checks(True)
    yield
    ad.set_finite_checks(prev)


def tiny_field_config(instances=2, **overrides):
    defaults = dict(pos_frequencies=2, dir_frequencies=1, trunk_depth=2,
                    trunk_width=12, code_dim=4, bottleneck_dim=3,
                    instance_count=instances)
    defaults.update(overrides)
    return FieldConfig(**defaults)


@pytest.fixture
def tiny_params():
    return FieldParameters(tiny_field_config(), np.random.default_rng(7))


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(3, 2, 4, 24, variation="both", heldout_views=2)


@pytest.fixture(scope="session")
def trained_setup(small_dataset):
    """A briefly trained small model shared by edit/render/service tests."""
    ds = small_dataset
    cfg = TrainConfig.desk(seed=5, ray_batch_size=64, max_iterations=400)
    settings = RenderSettings.desk(n_coarse=16, n_fine=16, tile_rays=1024)
    params = FieldParameters(
        tiny_field_config(instances=ds.instance_count, trunk_width=24,
                          pos_frequencies=4, dir_frequencies=2, code_dim=8,
                          bottleneck_dim=4, trunk_depth=2),
        np.random.default_rng(5))
    state = TrainState.fresh(params, cfg, settings)
    bank = RayBank(ds)
    prev = ad.set_finite_checks(False)
    try:
        for _ in range(cfg.max_iterations):
            train_step(state, bank)
    finally:
        ad.set_finite_checks(prev)
    return ds, params, settings
