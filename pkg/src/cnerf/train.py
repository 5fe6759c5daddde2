"""Joint optimization of the coarse/fine networks and per-instance codes.

Each step samples one instance, draws a ray batch from its training views,
renders both networks, and minimizes the summed squared photometric error
of the coarse and fine composites (plus an optional view-direction
self-consistency term for single-view-per-instance data). Codes ride along
with the network weights in the same Adam step; only the sampled
instance's code rows participate, so other instances' codes never move.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .field import FieldConfig, FieldParameters
from .metrics import MetricReport, psnr, ssim
from .optim import AdamState, adam_step
from .render import (RenderSettings, composite, deltas_for, generate_rays,
                     hierarchical_samples, merge_samples, render_view_seeded,
                     stratified_samples, _sample_points)
from .checkpoint import load_records, save_records


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    ray_batch_size: int = 1024
    max_iterations: int = 200_000
    eval_every: int = 0
    checkpoint_every: int = 0
    log_every: int = 100
    seed: int = 0
    viewdir_reg_weight: float = 0.0
    viewdir_K: int = 64
    viewdir_points: int = 16

    def __post_init__(self):
        if self.ray_batch_size < 1:
            raise ValueError("ray_batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        defaults = dict(learning_rate=5e-4, ray_batch_size=256, max_iterations=30_000)
        defaults.update(overrides)
        return cls(**defaults)


class RayBank:
    """Flattened training rays (origin, direction, target color) per instance."""

    def __init__(self, dataset, view_ids=None):
        self.per_instance = []
        view_ids = dataset.train_view_ids() if view_ids is None else view_ids
        for k in range(dataset.instance_count):
            origins, dirs, colors = [], [], []
            for v in view_ids:
                o, d, _ = generate_rays(dataset.camera(v))
                origins.append(o)
                dirs.append(d)
                colors.append(dataset.image(k, v).reshape(-1, 3))
            self.per_instance.append((
                np.concatenate(origins), np.concatenate(dirs),
                np.concatenate(colors).astype(np.float32),
            ))
        self.near = dataset.near
        self.far = dataset.far

    @classmethod
    def from_single_image(cls, image, camera):
        bank = cls.__new__(cls)
        o, d, _ = generate_rays(camera)
        bank.per_instance = [(o, d, np.asarray(image, dtype=np.float32).reshape(-1, 3))]
        bank.near = camera.near
        bank.far = camera.far
        return bank

    @property
    def instance_count(self):
        return len(self.per_instance)

    def rays(self, k):
        return self.per_instance[k]


@dataclass
class TrainState:
    params: FieldParameters
    adam: AdamState
    config: TrainConfig
    settings: RenderSettings
    iteration: int = 0
    rng: np.random.Generator = None
    last_loss: float = float("nan")
    loss_history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params, config: TrainConfig, settings: RenderSettings) -> "TrainState":
        return cls(
            params=params,
            adam=AdamState(learning_rate=config.learning_rate, beta1=config.beta1,
                           beta2=config.beta2, epsilon=config.epsilon),
            config=config,
            settings=settings,
            rng=np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1])),
        )


def photometric_batch(params, net, origins, dirs, t, z_s, z_c, background, far):
    """Composite one network over given sample positions; returns the
    CompositeResult (graph tensors)."""
    from .field import encode_position

    pts, dirs_rep = _sample_points(origins, dirs, t)
    gd = np.repeat(encode_position(dirs, params.config.dir_frequencies),
                   t.shape[1], axis=0)
    color, sigma = params.forward(net, pts, dirs_rep, z_s, z_c, gd=gd)
    return composite(ad.reshape(sigma, t.shape), color, t, deltas_for(t, far),
                     background, far)


def train_step(state: TrainState, bank: RayBank, instance: int | None = None):
    """One optimization step; returns the scalar loss.

    Raises TrainingDiverged with diagnostics on a non-finite loss.
    """
    if bank.instance_count == 0:
        raise ValueError("empty dataset")
    cfg, st = state.config, state.settings
    rng = state.rng
    k = int(rng.integers(bank.instance_count)) if instance is None else instance
    origins, dirs, colors = bank.rays(k)
    idx = rng.integers(0, origins.shape[0], size=cfg.ray_batch_size)
    o, d, target = origins[idx], dirs[idx], colors[idx]
    b = o.shape[0]

    z_s, z_c = state.params.shape_code(k), state.params.color_code(k)
    t_c = stratified_samples(bank.near, bank.far, st.n_coarse, b,
                             u=rng.random((b, st.n_coarse), dtype=np.float32))
    res_c = photometric_batch(state.params, "coarse", o, d, t_c, z_s, z_c,
                              st.background, bank.far)
    t_f = hierarchical_samples(res_c.weights.data, t_c, st.n_fine,
                               u=rng.random((b, st.n_fine)))
    t_m = merge_samples(t_c, t_f)
    res_f = photometric_batch(state.params, "fine", o, d, t_m, z_s, z_c,
                              st.background, bank.far)

    target_t = ad.constant(target)
    loss = ad.add(ad.sqnorm(ad.sub(res_c.color, target_t)),
                  ad.sqnorm(ad.sub(res_f.color, target_t)))
    if cfg.viewdir_reg_weight > 0.0:
        reg = _viewdir_reg_from_batch(state, o, d, t_m, z_s, z_c, rng)
        loss = ad.add(loss, reg * cfg.viewdir_reg_weight)

    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise TrainingDiverged(
            f"non-finite loss at iteration {state.iteration} "
            f"(instance {k}, ray ids {idx[:8].tolist()}...)"
        )

    trainable = state.params.net_params() + state.params.code_params(k)
    ad.zero_grads(trainable)
    loss.backward()
    adam_step(state.adam, trainable)
    ad.zero_grads(trainable)
    state.params.shape_version += 1
    state.params.color_version += 1

    state.iteration += 1
    state.last_loss = loss_value
    return loss_value


def viewdir_reg_loss(radiance_fn, points, d_actual, dir_pool):
    """Mean over points of || c(x, d) - mean_i c(x, d_i) ||^2.

    ``radiance_fn(points (N,3), dirs (N,3)) -> Tensor (N,3)`` evaluates the
    radiance; the inner mean runs over the K pooled directions.
    """
    p = points.shape[0]
    k = dir_pool.shape[0]
    c_actual = radiance_fn(points, d_actual)
    pts_rep = np.repeat(points, k, axis=0)
    dirs_rep = np.tile(dir_pool, (p, 1))
    c_pool = radiance_fn(pts_rep, dirs_rep)
    channels = []
    for ch in range(3):
        col = ad.reshape(ad.slice_cols(c_pool, ch, ch + 1), (p, k))
        channels.append(ad.tmean(col, axis=1, keepdims=True))
    c_mean = ad.concat(channels, axis=1)
    diff = ad.sub(c_actual, c_mean)
    return ad.tsum(ad.mul(diff, diff)) * (1.0 / p)


def sample_direction_pool(rng, count, elev_range_deg=(15.0, 33.0)):
    """Viewing directions matching the dataset's camera distribution:
    uniform azimuth, uniform elevation band, pointing at the scene."""
    azimuth = rng.uniform(0.0, 2 * np.pi, size=count)
    elev = np.deg2rad(rng.uniform(*elev_range_deg, size=count))
    d = -np.stack([np.cos(elev) * np.sin(azimuth), np.sin(elev),
                   np.cos(elev) * np.cos(azimuth)], axis=1)
    return d.astype(np.float32)


def _viewdir_reg_from_batch(state, origins, dirs, t, z_s, z_c, rng):
    cfg = state.config
    n_pts = min(cfg.viewdir_points, origins.shape[0])
    ray_ids = rng.choice(origins.shape[0], size=n_pts, replace=False)
    s_ids = rng.integers(0, t.shape[1], size=n_pts)
    points = origins[ray_ids] + t[ray_ids, s_ids, None] * dirs[ray_ids]
    pool = sample_direction_pool(rng, cfg.viewdir_K)

    def radiance_fn(pts, ds):
        color, _ = state.params.forward("fine", pts, ds, z_s, z_c)
        return color

    return viewdir_reg_loss(radiance_fn, points, dirs[ray_ids], pool)


class _FrozenExcept:
    """Temporarily freeze every parameter outside ``keep``."""

    def __init__(self, params: FieldParameters, keep):
        self.params = params
        self.keep = {p.name for p in keep}

    def __enter__(self):
        self.saved = [(p, p.trainable) for p in self.params.store]
        for p in self.params.store:
            if p.name not in self.keep:
                p.trainable = False
        return self

    def __exit__(self, *exc):
        for p, flag in self.saved:
            p.trainable = flag
        return False


def fit_single_image(params: FieldParameters, image, camera,
                     stage1_iters: int, stage2_iters: int,
                     config: TrainConfig | None = None,
                     settings: RenderSettings | None = None,
                     rng: np.random.Generator | None = None):
    """Two-stage fit of a single posed image as a new instance.

    Stage 1 optimizes only the fresh code rows (network weights frozen and
    bit-identical afterwards); stage 2 optimizes everything jointly. Stops
    early if the loss blows up past 10x its best value.
    """
    config = config or TrainConfig.desk()
    settings = settings or RenderSettings.desk()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    k_new = params.add_instance(rng)
    bank = RayBank.from_single_image(image, camera)
    report = {"instance": k_new, "stage1": [], "stage2": [], "diverged": False}

    def run_stage(trainable, iters, trace):
        if iters <= 0:
            return
        state = TrainState.fresh(params, config, settings)
        state.rng = rng
        best = float("inf")
        with _FrozenExcept(params, trainable):
            for _ in range(iters):
                # Instance index 0 inside the single-image bank = row k_new.
                loss = _fit_step(state, bank, k_new)
                trace.append(loss)
                best = min(best, loss)
                if loss > 10.0 * best and len(trace) > 10:
                    report["diverged"] = True
                    return

    run_stage(params.code_params(k_new), stage1_iters, report["stage1"])
    run_stage(params.net_params() + params.code_params(k_new), stage2_iters,
              report["stage2"])
    return k_new, report


def _fit_step(state, bank, code_instance):
    cfg, st = state.config, state.settings
    rng = state.rng
    origins, dirs, colors = bank.rays(0)
    idx = rng.integers(0, origins.shape[0], size=cfg.ray_batch_size)
    o, d, target = origins[idx], dirs[idx], colors[idx]
    z_s = state.params.shape_code(code_instance)
    z_c = state.params.color_code(code_instance)
    t_c = stratified_samples(bank.near, bank.far, st.n_coarse, o.shape[0],
                             u=rng.random((o.shape[0], st.n_coarse), dtype=np.float32))
    res_c = photometric_batch(state.params, "coarse", o, d, t_c, z_s, z_c,
                              st.background, bank.far)
    t_f = hierarchical_samples(res_c.weights.data, t_c, st.n_fine,
                               u=rng.random((o.shape[0], st.n_fine)))
    res_f = photometric_batch(state.params, "fine", o, d, merge_samples(t_c, t_f),
                              z_s, z_c, st.background, bank.far)
    target_t = ad.constant(target)
    loss = ad.add(ad.sqnorm(ad.sub(res_c.color, target_t)),
                  ad.sqnorm(ad.sub(res_f.color, target_t)))
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise TrainingDiverged(f"non-finite loss while fitting instance {code_instance}")
    trainable = [p for p in state.params.store if p.trainable]
    ad.zero_grads(trainable)
    loss.backward()
    adam_step(state.adam, [p for p in trainable if p.grad is not None])
    ad.zero_grads(trainable)
    state.params.shape_version += 1
    state.params.color_version += 1
    return loss_value


def evaluate(params: FieldParameters, dataset, split: str = "heldout",
             settings: RenderSettings | None = None, seed: int = 0,
             instances=None, view_limit: int | None = None) -> MetricReport:
    """Render a view split and score PSNR/SSIM against the dataset images."""
    settings = settings or RenderSettings.desk()
    views = dataset.heldout_view_ids() if split == "heldout" else dataset.train_view_ids()
    if view_limit is not None:
        views = views[:view_limit]
    instances = range(dataset.instance_count) if instances is None else instances
    report = MetricReport()
    for k in instances:
        for v in views:
            rendered = render_view_seeded(params, dataset.camera(v), k, v,
                                          settings=settings, seed=seed)
            truth = dataset.image(k, v)
            report.add(k, v, psnr(rendered.rgb, truth), ssim(rendered.rgb, truth))
    return report


# --- persistence --------------------------------------------------------------


def save_train_state(path, state: TrainState, extra: dict | None = None) -> None:
    config = {
        "field": asdict(state.params.config),
        "train": asdict(state.config),
        "render": asdict(state.settings),
        "iteration": state.iteration,
        "adam": {"learning_rate": state.adam.learning_rate, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "epsilon": state.adam.epsilon,
                 "step_count": state.adam.step_count},
        "rng_state": state.rng.bit_generator.state,
    }
    if extra:
        config.update(extra)

    def records():
        yield from state.params.to_records()
        for name, m in state.adam.m.items():
            yield f"adam/m/{name}", m
        for name, v in state.adam.v.items():
            yield f"adam/v/{name}", v

    save_records(path, config, records())


def load_train_state(path) -> TrainState:
    config, records = load_records(path)
    params = FieldParameters(FieldConfig.from_dict(config["field"]), _empty=True)
    adam_cfg = config["adam"]
    adam = AdamState(learning_rate=adam_cfg["learning_rate"], beta1=adam_cfg["beta1"],
                     beta2=adam_cfg["beta2"], epsilon=adam_cfg["epsilon"],
                     step_count=adam_cfg["step_count"])
    from .autodiff import Parameter

    for name, value in records.items():
        if name.startswith("adam/m/"):
            adam.m[name[len("adam/m/"):]] = value.copy()
        elif name.startswith("adam/v/"):
            adam.v[name[len("adam/v/"):]] = value.copy()
        else:
            params.store.add(Parameter(name, value))
    state = TrainState(
        params=params,
        adam=adam,
        config=TrainConfig(**config["train"]),
        settings=RenderSettings(**_detuple(config["render"])),
        iteration=config["iteration"],
        rng=np.random.default_rng(),
    )
    state.rng.bit_generator.state = config["rng_state"]
    return state


def _detuple(render_cfg: dict) -> dict:
    cfg = dict(render_cfg)
    if "background" in cfg:
        cfg["background"] = tuple(cfg["background"])
    return cfg


def train_loop(state: TrainState, bank: RayBank, dataset=None, out_dir=None,
               log_cb=None, eval_instances=None):
    """Run to max_iterations with JSONL logging and periodic checkpoints."""
    cfg = state.config
    log_path = os.path.join(out_dir, "train_log.jsonl") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log_f = open(log_path, "a") if log_path else None
    started = time.time()
    try:
        while state.iteration < cfg.max_iterations:
            loss = train_step(state, bank)
            i = state.iteration
            entry = None
            if cfg.log_every and i % cfg.log_every == 0:
                entry = {"iteration": i, "loss": loss,
                         "elapsed_s": round(time.time() - started, 3)}
            if cfg.eval_every and dataset is not None and i % cfg.eval_every == 0:
                report = evaluate(state.params, dataset, settings=state.settings,
                                  instances=eval_instances, view_limit=1)
                entry = entry or {"iteration": i, "loss": loss}
                entry["psnr_eval"] = report.global_means()["psnr_db"]
            if entry:
                state.loss_history.append((i, loss))
                if log_f:
                    log_f.write(json.dumps(entry) + "\n")
                    log_f.flush()
                if log_cb:
                    log_cb(entry)
            if cfg.checkpoint_every and out_dir and i % cfg.checkpoint_every == 0:
                save_train_state(os.path.join(out_dir, "checkpoint.cre"), state)
        if out_dir:
            save_train_state(os.path.join(out_dir, "checkpoint.cre"), state)
    finally:
        if log_f:
            log_f.close()
    return state
