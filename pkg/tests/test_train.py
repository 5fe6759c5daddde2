import numpy as np
import pytest

from cnerf import autodiff as ad
from cnerf.field import FieldConfig, FieldParameters
from cnerf.render import RenderSettings
from cnerf.scene import generate_dataset
from cnerf.train import (RayBank, TrainConfig, TrainState, TrainingDiverged,
                         evaluate, fit_single_image, load_train_state,
                         sample_direction_pool, save_train_state, train_step,
                         viewdir_reg_loss)

from conftest import tiny_field_config


def make_state(ds, seed=0, **cfg_overrides):
    cfg = TrainConfig.desk(seed=seed, ray_batch_size=32, **cfg_overrides)
    settings = RenderSettings.desk(n_coarse=8, n_fine=8)
    params = FieldParameters(
        tiny_field_config(instances=ds.instance_count, trunk_width=16),
        np.random.default_rng(seed))
    return TrainState.fresh(params, cfg, settings)


@pytest.fixture(scope="module")
def micro_dataset():
    return generate_dataset(21, 2, 2, 16, heldout_views=1)


def test_loss_non_negative(micro_dataset):
    state = make_state(micro_dataset)
    bank = RayBank(micro_dataset)
    for _ in range(5):
        assert train_step(state, bank) >= 0.0


def test_all_frozen_params_keep_loss_constant(micro_dataset):
    state = make_state(micro_dataset)
    bank = RayBank(micro_dataset)
    for p in state.params.store:
        p.trainable = False
    # identical rng draws per step would hide frozen-ness; reseed per step
    losses = []
    for _ in range(3):
        state.rng = np.random.default_rng(99)
        # all params frozen -> adam receives an empty set, nothing moves
        snapshot = state.params.store.snapshot()
        losses.append(train_step(state, bank))
        for name, value in snapshot.items():
            np.testing.assert_array_equal(state.params.store[name].data, value)
    assert losses[0] == losses[1] == losses[2]


def test_code_updates_local_to_sampled_instance(micro_dataset):
    state = make_state(micro_dataset)
    bank = RayBank(micro_dataset)
    before = {name: state.params.store[name].data.copy()
              for name in state.params.store.names() if name.startswith("codes/")}
    # force instance 0 on every step
    for _ in range(5):
        train_step(state, bank, instance=0)
    for name, old in before.items():
        new = state.params.store[name].data
        if name.endswith("0000"):
            assert not np.array_equal(new, old)
        else:
            np.testing.assert_array_equal(new, old)


def test_deterministic_loss_curve(micro_dataset):
    bank = RayBank(micro_dataset)
    curves = []
    for _ in range(2):
        state = make_state(micro_dataset, seed=4)
        curves.append([train_step(state, bank) for _ in range(6)])
    assert curves[0] == curves[1]


def test_overfit_tiny_dataset_drives_loss_down():
    ds = generate_dataset(22, 1, 1, 8, heldout_views=0)
    bank = RayBank(ds)
    cfg = TrainConfig.desk(seed=1, ray_batch_size=64, learning_rate=2e-3)
    settings = RenderSettings.desk(n_coarse=8, n_fine=8)
    params = FieldParameters(
        tiny_field_config(instances=1, trunk_width=16, pos_frequencies=4),
        np.random.default_rng(1))
    state = TrainState.fresh(params, cfg, settings)
    prev = ad.set_finite_checks(False)
    try:
        first = np.mean([train_step(state, bank) for _ in range(20)])
        for _ in range(800):
            loss = train_step(state, bank)
    finally:
        ad.set_finite_checks(prev)
    # memorization of a single 8x8 view must succeed
    assert loss < first * 0.05
    assert loss < 0.05 * 64  # mean-squared error well below 5% per ray


def test_nonfinite_loss_aborts_with_diagnostics(micro_dataset):
    state = make_state(micro_dataset)
    bank = RayBank(micro_dataset)
    # poison a target color; the loss goes NaN while the field stays finite
    bank.per_instance[0][2][:] = np.nan
    bank.per_instance[1][2][:] = np.nan
    prev = ad.set_finite_checks(False)  # exercise the trainer's own guard
    try:
        with pytest.raises(TrainingDiverged, match="iteration"):
            train_step(state, bank)
    finally:
        ad.set_finite_checks(prev)


def test_checkpoint_resume_bit_identical(tmp_path, micro_dataset):
    bank = RayBank(micro_dataset)
    state = make_state(micro_dataset, seed=8)
    for _ in range(4):
        train_step(state, bank)
    path = tmp_path / "ckpt.cre"
    save_train_state(path, state)
    continued = [train_step(state, bank) for _ in range(4)]

    resumed = load_train_state(path)
    resumed_losses = [train_step(resumed, bank) for _ in range(4)]
    assert continued == resumed_losses


def test_viewdir_reg_hand_value():
    # radiance alternates between black and white across two directions
    def radiance_fn(points, dirs):
        values = np.where(dirs[:, :1] > 0, 1.0, 0.0)
        return ad.constant(np.repeat(values, 3, axis=1).astype(np.float32))

    points = np.zeros((4, 3), dtype=np.float32)
    d_actual = np.tile(np.array([[1.0, 0, 0]], dtype=np.float32), (4, 1))
    pool = np.array([[1.0, 0, 0], [-1.0, 0, 0]], dtype=np.float32)
    loss = viewdir_reg_loss(radiance_fn, points, d_actual, pool)
    # c = (1,1,1), mean = (.5,.5,.5) -> ||diff||^2 = 0.75
    assert loss.item() == pytest.approx(0.75, abs=1e-6)


def test_viewdir_reg_zero_for_direction_independent_radiance():
    def radiance_fn(points, dirs):
        return ad.constant(np.full((points.shape[0], 3), 0.3, dtype=np.float32))

    points = np.zeros((3, 3), dtype=np.float32)
    d = np.tile(np.array([[0, 0, 1.0]], dtype=np.float32), (3, 1))
    pool = sample_direction_pool(np.random.default_rng(0), 16)
    assert viewdir_reg_loss(radiance_fn, points, d, pool).item() == pytest.approx(0.0, abs=1e-7)


def test_viewdir_reg_nonnegative_on_real_field(tiny_params):
    z_s, z_c = tiny_params.shape_code(0), tiny_params.color_code(0)

    def radiance_fn(points, dirs):
        c, _ = tiny_params.forward("fine", points, dirs, z_s, z_c)
        return c

    rng = np.random.default_rng(0)
    points = rng.uniform(-1, 1, size=(5, 3)).astype(np.float32)
    pool = sample_direction_pool(rng, 8)
    d = pool[:5] / np.linalg.norm(pool[:5], axis=1, keepdims=True)
    assert viewdir_reg_loss(radiance_fn, points, d, pool).item() >= 0.0


def test_viewdir_reg_weight_wired_into_train_step(micro_dataset):
    bank = RayBank(micro_dataset)
    base = make_state(micro_dataset, seed=2)
    reg = make_state(micro_dataset, seed=2, viewdir_reg_weight=10.0, viewdir_K=4)
    reg.config.viewdir_points = 4
    l0 = train_step(base, bank)
    l1 = train_step(reg, bank)
    assert l1 != l0  # the extra term changes the loss


def test_evaluate_ground_truth_against_itself(micro_dataset):
    # rows for each instance/view pair; rendering the dataset image is not
    # the point here, the sentinel path is
    from cnerf.metrics import MetricReport, psnr, ssim

    report = MetricReport()
    for k in range(micro_dataset.instance_count):
        for v in micro_dataset.heldout_view_ids():
            img = micro_dataset.image(k, v)
            report.add(k, v, psnr(img, img), ssim(img, img))
    assert all(np.isinf(r.psnr_db) for r in report.rows)
    assert all(r.ssim == pytest.approx(1.0) for r in report.rows)
    assert len(report.rows) == micro_dataset.instance_count


def test_evaluate_row_count(trained_setup):
    ds, params, settings = trained_setup
    report = evaluate(params, ds, settings=settings)
    assert len(report.rows) == ds.instance_count * len(ds.heldout_view_ids())
    assert set(r.instance for r in report.rows) == set(range(ds.instance_count))


# --- single-image fitting ---


def test_fit_zero_budget_leaves_parameters_unchanged(trained_setup):
    ds, params, settings = trained_setup
    work = params.clone()
    before = work.store.snapshot()
    cam = ds.camera(ds.heldout_view_ids()[0])
    image = ds.image(0, ds.heldout_view_ids()[0])
    k_new, report = fit_single_image(work, image, cam, 0, 0,
                                     settings=settings)
    for name, value in before.items():
        np.testing.assert_array_equal(work.store[name].data, value)
    assert k_new == ds.instance_count


def test_fit_stage1_keeps_mlp_weights_bit_identical(trained_setup):
    ds, params, settings = trained_setup
    work = params.clone()
    mlp_before = {p.name: p.data.copy() for p in work.net_params()}
    cam = ds.camera(ds.heldout_view_ids()[0])
    image = ds.image(1, ds.heldout_view_ids()[0])
    cfg = TrainConfig.desk(seed=3, ray_batch_size=32, learning_rate=5e-3)
    k_new, report = fit_single_image(work, image, cam, 30, 0, config=cfg,
                                     settings=settings)
    for name, value in mlp_before.items():
        np.testing.assert_array_equal(work.store[name].data, value)
    assert len(report["stage1"]) == 30
    assert report["stage1"][-1] < report["stage1"][0]


def test_fit_stage2_improves_or_matches_stage1(trained_setup):
    ds, params, settings = trained_setup
    work = params.clone()
    cam = ds.camera(ds.heldout_view_ids()[0])
    image = ds.image(0, ds.heldout_view_ids()[0])
    cfg = TrainConfig.desk(seed=4, ray_batch_size=48, learning_rate=2e-3)
    _, report = fit_single_image(work, image, cam, 40, 40, config=cfg,
                                 settings=settings)
    assert min(report["stage2"]) <= min(report["stage1"]) * 1.05
