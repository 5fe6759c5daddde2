"""Batch entry points: dataset generation, training, evaluation, rendering,
offline edits, and the editing service.

Config precedence is defaults < --config JSON file < explicit flags. Every
subcommand accepts --seed; --threads caps the BLAS pool (1 = bit-exact
reproducibility mode) and must act before numpy loads, hence the early
environment fiddling below. Failures exit 3 with a JSON error on stderr;
usage errors exit 2.
"""

from __future__ import annotations

import json
import os
import sys


def _configure_threads() -> None:
    # Parse --threads ahead of any numpy import; OpenBLAS reads the
    # environment only at load time.
    argv = sys.argv
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


_configure_threads()

import click  # noqa: E402


def _fail(message: str, code: int = 3):
    sys.stderr.write(json.dumps({"error": message}) + "\n")
    sys.exit(code)


def _load_config_file(path):
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _merged(config_file: dict, section: str, flags: dict) -> dict:
    merged = dict(config_file.get(section, {}))
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


@click.group()
def main():
    """Conditional radiance field engine: train, edit, render, serve."""


def _common_options(fn):
    fn = click.option("--seed", type=int, default=None, help="Deterministic seed.")(fn)
    fn = click.option("--threads", type=int, default=None,
                      help="BLAS thread cap; 1 = reproducibility mode.")(fn)
    return fn


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--instances", type=int, default=8, show_default=True)
@click.option("--views", type=int, default=10, show_default=True,
              help="Training views per instance.")
@click.option("--heldout", type=int, default=4, show_default=True)
@click.option("--res", type=int, default=64, show_default=True)
@click.option("--variation", type=click.Choice(["color", "shape", "both"]),
              default="both", show_default=True)
@click.option("--shaded", is_flag=True, default=False)
@click.option("--geometry-pool", type=int, default=None,
              help="Reuse this many shapes round-robin under fresh palettes.")
@_common_options
def gen_data(out, instances, views, heldout, res, variation, shaded,
             geometry_pool, seed, threads):
    """Generate a synthetic dataset with oracle ground truth."""
    from .scene import generate_dataset, save_dataset

    try:
        ds = generate_dataset(seed or 0, instances, views, res,
                              variation=variation, heldout_views=heldout,
                              shaded=shaded, geometry_pool=geometry_pool)
        save_dataset(ds, out)
    except Exception as e:  # noqa: BLE001
        _fail(f"gen-data failed: {e}")
    click.echo(f"wrote {instances} instances x {views + heldout} views to {out}")


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--iters", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--width", type=int, default=None, help="Trunk width.")
@click.option("--variant", type=click.Choice(["full", "split", "single"]),
              default=None, help="Model ladder variant (default full).")
@click.option("--n-coarse", type=int, default=None)
@click.option("--n-fine", type=int, default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--checkpoint-every", type=int, default=None)
@click.option("--viewdir-reg", type=float, default=None)
@click.option("--resume", type=click.Path(exists=True), help="Checkpoint to resume.")
@_common_options
def train(dataset_path, out, config_path, iters, batch, lr, width, variant,
          n_coarse, n_fine, eval_every, checkpoint_every, viewdir_reg,
          resume, seed, threads):
    """Train a conditional radiance field on a dataset."""
    import numpy as np

    from .field import FieldConfig, FieldParameters
    from .render import RenderSettings
    from .scene import load_dataset
    from .train import (RayBank, TrainConfig, TrainState, load_train_state,
                        save_train_state, train_loop)

    try:
        cfg_file = _load_config_file(config_path)
        ds = load_dataset(dataset_path)
        train_kwargs = _merged(cfg_file, "train", {
            "max_iterations": iters, "ray_batch_size": batch, "learning_rate": lr,
            "eval_every": eval_every, "checkpoint_every": checkpoint_every,
            "viewdir_reg_weight": viewdir_reg, "seed": seed,
        })
        render_kwargs = _merged(cfg_file, "render", {
            "n_coarse": n_coarse, "n_fine": n_fine,
        })
        field_kwargs = _merged(cfg_file, "field", {"trunk_width": width})
        variant = variant or cfg_file.get("variant", "full")

        if resume:
            state = load_train_state(resume)
            if iters is not None:
                state.config.max_iterations = iters
        else:
            tcfg = TrainConfig.desk(**train_kwargs)
            settings = RenderSettings.desk(**render_kwargs)
            fcfg = FieldConfig.ablation(variant, ds.instance_count,
                                        trunk_width=field_kwargs.get("trunk_width", 64),
                                        **{k: v for k, v in field_kwargs.items()
                                           if k != "trunk_width"})
            rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0xF1E1D]))
            params = FieldParameters(fcfg, rng)
            state = TrainState.fresh(params, tcfg, settings)
        bank = RayBank(ds)
        train_loop(state, bank, dataset=ds, out_dir=out)
        save_train_state(os.path.join(out, "checkpoint.cre"), state,
                         extra={"dataset_fingerprint": ds.fingerprint()})
    except Exception as e:  # noqa: BLE001
        _fail(f"train failed: {e}")
    click.echo(f"trained {state.iteration} iterations; checkpoint in {out}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["heldout", "train"]), default="heldout",
              show_default=True)
@click.option("--n-coarse", type=int, default=None, help="Render-time sample count.")
@click.option("--n-fine", type=int, default=None)
@_common_options
def eval_cmd(checkpoint, dataset_path, out, split, n_coarse, n_fine, seed, threads):
    """Render a view split and report PSNR/SSIM per instance."""
    import dataclasses

    from .field import FieldParameters
    from .scene import load_dataset
    from .train import evaluate

    try:
        params, config = FieldParameters.load(checkpoint)
        ds = load_dataset(dataset_path)
        settings = _settings_from(config)
        overrides = {k: v for k, v in
                     (("n_coarse", n_coarse), ("n_fine", n_fine)) if v}
        if overrides:
            settings = dataclasses.replace(settings, **overrides)
        report = evaluate(params, ds, split=split, settings=settings, seed=seed or 0)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "metrics.json"), "w") as f:
            f.write(report.to_json())
        with open(os.path.join(out, "metrics.csv"), "w") as f:
            f.write(report.to_csv())
    except Exception as e:  # noqa: BLE001
        _fail(f"eval failed: {e}")
    means = report.global_means()
    click.echo(f"mean PSNR {means['psnr_db']:.2f} dB, SSIM {means['ssim']:.4f} -> {out}")


def _settings_from(config: dict):
    from .render import RenderSettings

    render_cfg = config.get("render")
    if not render_cfg:
        return RenderSettings.desk()
    render_cfg = dict(render_cfg)
    render_cfg["background"] = tuple(render_cfg.get("background", (1, 1, 1)))
    return RenderSettings(**render_cfg)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--instance", type=int, default=0, show_default=True)
@click.option("--view", type=int, default=None)
@click.option("--pose", type=click.Path(exists=True), help="Camera JSON file.")
@click.option("--res", type=int, default=None)
@click.option("--quality", type=click.Choice(["full", "coarse"]), default="full")
@click.option("--out", required=True, type=click.Path())
@click.option("--depth", "with_depth", is_flag=True, help="Also write 16-bit depth.")
@_common_options
def render(checkpoint, dataset_path, instance, view, pose, res, quality, out,
           with_depth, seed, threads):
    """Render one view of an instance to PNG."""
    from .field import FieldParameters
    from .render import Camera, render_view
    from .scene import load_dataset

    try:
        params, config = FieldParameters.load(checkpoint)
        ds = load_dataset(dataset_path)
        camera = Camera.load(pose) if pose else ds.camera(view if view is not None else 0)
        if res:
            scale = res / camera.width
            camera = Camera(camera.pose, camera.focal * scale, res, res,
                            camera.near, camera.far)
        rendered = render_view(params, camera, instance=instance,
                               settings=_settings_from(config), seed=seed or 0,
                               quality=quality)
        os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
        rendered.save_rgb(out)
        if with_depth:
            rendered.save_depth(os.path.splitext(out)[0] + "_depth.png", camera.far)
    except Exception as e:  # noqa: BLE001
        _fail(f"render failed: {e}")
    click.echo(f"wrote {out}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--request", "request_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--target-reference", default=None,
              help="Reference instance name for edit-vs-target metrics.")
@_common_options
def edit(checkpoint, dataset_path, request_path, out, target_reference, seed, threads):
    """Run one offline edit; writes the edited checkpoint, before/after
    renders, and (optionally) PSNR against a reference instance."""
    import numpy as np

    from .edit import EditRequest, run_edit
    from .field import FieldParameters
    from .metrics import psnr
    from .render import render_view_seeded
    from .scene import load_dataset
    from .train import evaluate

    try:
        params, config = FieldParameters.load(checkpoint)
        ds = load_dataset(dataset_path)
        settings = _settings_from(config)
        with open(request_path) as f:
            request = EditRequest.from_json(f.read())
        if seed is not None:
            request.hyper.seed = seed
        cameras = {v: ds.camera(v) for v in range(len(ds.cameras))}
        os.makedirs(out, exist_ok=True)
        k = request.instance

        heldout = ds.heldout_view_ids()
        pre_views = {v: render_view_seeded(params, ds.camera(v), k, v,
                                           settings=settings) for v in heldout}
        for v, rv in pre_views.items():
            rv.save_rgb(os.path.join(out, f"before_view_{v:03d}.png"))

        result = run_edit(params, request, cameras, settings=settings)

        post_views = {v: render_view_seeded(params, ds.camera(v), k, v,
                                            settings=settings) for v in heldout}
        for v, rv in post_views.items():
            rv.save_rgb(os.path.join(out, f"after_view_{v:03d}.png"))
        params.save(os.path.join(out, "edited.cre"),
                    extra_config={k2: v2 for k2, v2 in config.items() if k2 != "field"})

        report = {
            "kind": request.kind,
            "instance": k,
            "iterations": len(result.loss_trace),
            "final_loss": result.loss_trace[-1] if result.loss_trace else None,
            "elapsed_seconds": result.elapsed_seconds,
        }
        if target_reference:
            pre, post = [], []
            for v in heldout:
                truth = ds.reference_image(target_reference, v)
                pre.append(psnr(pre_views[v].rgb, truth))
                post.append(psnr(post_views[v].rgb, truth))
            report["pre_psnr_vs_target"] = float(np.mean(pre))
            report["post_psnr_vs_target"] = float(np.mean(post))
        opacity_delta = max(float(np.abs(post_views[v].opacity - pre_views[v].opacity).max())
                            for v in heldout)
        report["max_opacity_change"] = opacity_delta
        with open(os.path.join(out, "edit_report.json"), "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    except Exception as e:  # noqa: BLE001
        _fail(f"edit failed: {e}")
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@main.command()
@click.option("--checkpoint-dir", required=True, type=click.Path(exists=True),
              envvar="CNERF_CHECKPOINT_DIR")
@click.option("--dataset-dir", required=True, type=click.Path(exists=True),
              envvar="CNERF_DATASET_DIR")
@click.option("--ui-dir", type=click.Path(), default=None, envvar="CNERF_UI_DIR")
@click.option("--host", default="127.0.0.1", show_default=True, envvar="CNERF_HOST")
@click.option("--port", type=int, default=8642, show_default=True, envvar="CNERF_PORT")
@_common_options
def serve(checkpoint_dir, dataset_dir, ui_dir, host, port, seed, threads):
    """Start the interactive editing service."""
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint_dir, dataset_dir, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
