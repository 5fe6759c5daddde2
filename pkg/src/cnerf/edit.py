"""Scribble-driven edits: local recoloring, shape removal/addition, and
shape/color code transfer.

Edits optimize only the subnetworks that matter for the edit kind (the
radiance head plus the instance's color code for color edits; the fusion
trunk plus the density head for shape edits) while the coarse network and
everything upstream stay frozen. Constraint rays are subsampled from the
scribbles once per edit; sample positions along them are frozen at edit
start, which is what makes the feature caches sound: anything computed by
frozen subnetworks at fixed positions is a constant of the optimization.
"""

from __future__ import annotations

import base64
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .field import FieldParameters, encode_position
from .optim import AdamState, adam_step
from .render import (RenderSettings, composite, deltas_for, generate_rays,
                     hierarchical_samples, merge_samples, render_view_seeded,
                     stratified_samples, _sample_points)

EDIT_KINDS = ("color", "shape_remove", "shape_remove_occluded", "shape_add",
              "shape_add_density", "transfer_shape", "transfer_color")
SHAPE_KINDS = ("shape_remove", "shape_remove_occluded", "shape_add", "shape_add_density")

LOG_FLOOR = 1e-10


class EditError(ValueError):
    pass


class EditDiverged(RuntimeError):
    pass


@dataclass
class Scribble:
    """Labeled pixels on one rendered view; fg drives the edit, bg anchors."""

    view_id: int
    fg: np.ndarray                      # (M, 2) int (row, col)
    bg: np.ndarray                      # (P, 2) int
    fg_colors: np.ndarray | None = None  # (M, 3) per-pixel targets, optional

    def __post_init__(self):
        self.fg = np.asarray(self.fg, dtype=np.int64).reshape(-1, 2)
        self.bg = np.asarray(self.bg, dtype=np.int64).reshape(-1, 2)
        if self.fg_colors is not None:
            self.fg_colors = np.asarray(self.fg_colors, dtype=np.float32).reshape(-1, 3)
            if self.fg_colors.shape[0] != self.fg.shape[0]:
                raise EditError("fg_colors length must match fg pixel count")
        fg_set = {tuple(p) for p in self.fg}
        if any(tuple(p) in fg_set for p in self.bg):
            raise EditError("fg and bg scribbles overlap")

    def validate_bounds(self, height: int, width: int) -> None:
        for pts in (self.fg, self.bg):
            if pts.size and ((pts < 0).any() or (pts[:, 0] >= height).any()
                             or (pts[:, 1] >= width).any()):
                raise EditError(f"scribble pixels outside {height}x{width} view")

    def to_dict(self) -> dict:
        d = {"view_id": self.view_id, "fg": self.fg.tolist(), "bg": self.bg.tolist()}
        if self.fg_colors is not None:
            d["fg_colors"] = self.fg_colors.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scribble":
        if "mask_png_base64" in d:
            return cls.from_mask_png(d["view_id"],
                                     base64.b64decode(d["mask_png_base64"]))
        return cls(d["view_id"], d.get("fg", []), d.get("bg", []),
                   d.get("fg_colors"))

    @classmethod
    def from_mask(cls, view_id: int, mask: np.ndarray) -> "Scribble":
        """Indexed mask: 0 = untouched, 1 = fg, 2 = bg."""
        mask = np.asarray(mask)
        fg = np.argwhere(mask == 1)
        bg = np.argwhere(mask == 2)
        return cls(view_id, fg, bg)

    @classmethod
    def from_mask_png(cls, view_id: int, png_bytes: bytes) -> "Scribble":
        with Image.open(io.BytesIO(png_bytes)) as im:
            mask = np.asarray(im.convert("L"))
        return cls.from_mask(view_id, mask)

    def to_mask(self, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=np.uint8)
        if self.fg.size:
            mask[self.fg[:, 0], self.fg[:, 1]] = 1
        if self.bg.size:
            mask[self.bg[:, 0], self.bg[:, 1]] = 2
        return mask


def parse_hex_color(value: str):
    value = value.lstrip("#")
    if len(value) != 6:
        raise EditError(f"expected RRGGBB hex color, got {value!r}")
    return tuple(int(value[i : i + 2], 16) / 255.0 for i in (0, 2, 4))


@dataclass
class EditHyper:
    lambda_reg: float = 10.0
    lambda_dens: float = 0.01
    learning_rate: float = 1e-2
    iterations: int = 100
    color_ray_limit: int = 64
    shape_ray_limit: int = 8192
    batch_rays: int = 1024
    seed: int = 0
    use_feature_cache: bool = True

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_dens < 0:
            raise EditError("loss weights must be non-negative")


@dataclass
class EditRequest:
    kind: str
    instance: int
    scribbles: list = field(default_factory=list)
    target_color: tuple | None = None
    source_instance: int | None = None
    copy_region: Scribble | None = None
    paste_location: Scribble | None = None
    trainable_scope: str = "default"  # default | all | codes
    hyper: EditHyper = field(default_factory=EditHyper)

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise EditError(f"unknown edit kind {self.kind!r}")
        if self.kind == "color" and self.target_color is None:
            if not any(s.fg_colors is not None for s in self.scribbles):
                raise EditError("color edits need a target color")
        if self.kind in ("shape_add", "shape_add_density", "transfer_shape",
                         "transfer_color") and self.source_instance is None:
            raise EditError(f"{self.kind} needs a source_instance")

    def to_json(self) -> str:
        d = {
            "kind": self.kind,
            "instance": self.instance,
            "scribbles": [s.to_dict() for s in self.scribbles],
            "trainable_scope": self.trainable_scope,
            "hyper": {k: getattr(self.hyper, k) for k in (
                "lambda_reg", "lambda_dens", "learning_rate", "iterations",
                "color_ray_limit", "shape_ray_limit", "batch_rays", "seed",
                "use_feature_cache")},
        }
        if self.target_color is not None:
            d["target_color"] = list(self.target_color)
        if self.source_instance is not None:
            d["source_instance"] = self.source_instance
        if self.copy_region is not None:
            d["copy_region"] = self.copy_region.to_dict()
        if self.paste_location is not None:
            d["paste_location"] = self.paste_location.to_dict()
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EditRequest":
        target = d.get("target_color")
        if isinstance(target, str):
            target = parse_hex_color(target)
        elif target is not None:
            target = tuple(target)
        return cls(
            kind=d["kind"],
            instance=d["instance"],
            scribbles=[Scribble.from_dict(s) for s in d.get("scribbles", [])],
            target_color=target,
            source_instance=d.get("source_instance"),
            copy_region=Scribble.from_dict(d["copy_region"]) if d.get("copy_region") else None,
            paste_location=Scribble.from_dict(d["paste_location"]) if d.get("paste_location") else None,
            trainable_scope=d.get("trainable_scope", "default"),
            hyper=EditHyper(**d.get("hyper", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "EditRequest":
        return cls.from_dict(json.loads(text))


@dataclass
class EditResult:
    kind: str
    instance: int
    delta_old: dict
    delta_new: dict
    loss_trace: list
    iter_seconds: list
    previews: dict
    elapsed_seconds: float
    cancelled: bool = False

    def revert(self, params: FieldParameters) -> None:
        params.store.restore(self.delta_old)
        params.note_updated(self.delta_old.keys())

    def reapply(self, params: FieldParameters) -> None:
        params.store.restore(self.delta_new)
        params.note_updated(self.delta_new.keys())


def select_trainable(params: FieldParameters, kind: str, instance: int,
                     scope: str = "default"):
    """The named parameter subset an edit may touch; the coarse network and
    the shared/instance trunks are always frozen."""
    if kind not in EDIT_KINDS:
        raise EditError(f"unknown edit kind {kind!r}")
    if scope == "all":
        return params.net_params("fine") + params.code_params(instance)
    if scope == "codes":
        return params.code_params(instance)
    if scope != "default":
        raise EditError(f"unknown trainable scope {scope!r}")
    if kind == "color":
        return params.store.with_prefix("fine/rad/") + [params.color_code(instance)]
    if kind in SHAPE_KINDS:
        return params.store.with_prefix("fine/fuse/", "fine/dens/")
    return []  # transfers swap codes, nothing is optimized


def subsample_constraints(scribble: Scribble, kind: str,
                          rng: np.random.Generator,
                          color_limit: int = 64, shape_limit: int = 8192):
    """Uniform, label-preserving subsample of fg+bg pixels, without
    replacement, capped at the per-kind ray budget."""
    if scribble.fg.shape[0] == 0:
        raise EditError("an edit needs at least one foreground constraint")
    limit = color_limit if kind == "color" else shape_limit
    pixels = np.concatenate([scribble.fg, scribble.bg]) if scribble.bg.size \
        else scribble.fg.copy()
    labels = np.concatenate([np.ones(scribble.fg.shape[0], dtype=bool),
                             np.zeros(scribble.bg.shape[0], dtype=bool)])
    total = pixels.shape[0]
    if total > limit:
        keep = rng.choice(total, size=limit, replace=False)
        keep.sort()
        pixels, labels = pixels[keep], labels[keep]
    return pixels, labels


def first_mode_zeroing(sigma: np.ndarray, tau: float | None = None) -> np.ndarray:
    """Zero the first density mode per ray: from the first sample above the
    threshold up to (excluding) the next sample at or below it.

    ``tau=None`` uses 0.01 * max density per ray, since trained fields
    rarely emit exact zeros.
    """
    sigma = np.asarray(sigma, dtype=np.float32)
    out = sigma.copy()
    r, s = sigma.shape
    if tau is None:
        tau_r = 0.01 * sigma.max(axis=1, keepdims=True)
    else:
        tau_r = np.full((r, 1), tau, dtype=np.float32)
    above = sigma > tau_r
    has_mode = above.any(axis=1)
    first = np.argmax(above, axis=1)
    cols = np.arange(s)[None, :]
    closes = (~above) & (cols >= first[:, None])
    end = np.where(closes.any(axis=1), np.argmax(closes, axis=1), s)
    span = (cols >= first[:, None]) & (cols < end[:, None]) & has_mode[:, None]
    out[span] = 0.0
    return out


# --- losses -------------------------------------------------------------------


def reconstruction_loss(pred_colors: ad.Tensor, target_colors) -> ad.Tensor:
    """Sum of squared distances between composited and target ray colors."""
    return ad.sqnorm(ad.sub(pred_colors,
                            ad.constant(np.asarray(target_colors, dtype=np.float32))))


def reg_loss(params: FieldParameters, snapshot: dict) -> ad.Tensor:
    """Mean squared drift of the trainable subset from its pre-edit values."""
    total = 0
    terms = None
    for name, old in snapshot.items():
        if name not in params.store:
            raise EditError(f"regularizer snapshot references unknown parameter {name!r}")
        p = params.store[name]
        if p.data.shape != old.shape:
            raise EditError(f"regularizer snapshot shape mismatch for {name!r}")
        flat = ad.reshape(p, (1, p.data.size))
        diff = ad.sub(flat, ad.constant(old.reshape(1, -1)))
        term = ad.tsum(ad.mul(diff, diff))
        terms = term if terms is None else ad.add(terms, term)
        total += old.size
    if terms is None:
        return ad.constant(np.zeros(1, dtype=np.float32))
    return terms * (1.0 / total)


def _simplex(sigma: ad.Tensor) -> ad.Tensor:
    """Normalize per-ray densities to sum to one (all-zero rays stay zero)."""
    total = ad.maximum_scalar(ad.tsum(sigma, axis=1, keepdims=True), 1e-12)
    return ad.div(sigma, ad.broadcast_cols(total, sigma.data.shape[1]))


def density_entropy_loss(sigma: ad.Tensor) -> ad.Tensor:
    """Sum over rays of the entropy of the normalized density vector.

    Rays with (near-)zero total density contribute nothing; the log carries
    a 1e-10 floor so one-hot rows come out exactly zero.
    """
    p = _simplex(sigma)
    plogp = ad.mul(p, ad.log_clipped(p, LOG_FLOOR))
    return ad.neg(ad.tsum(plogp))


def density_cross_entropy_loss(sigma: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Sum over rays of -target^T log(predicted), both on the simplex."""
    p = _simplex(sigma)
    t = np.asarray(target, dtype=np.float64)
    sums = t.sum(axis=1, keepdims=True)
    t = np.where(sums > 0, t / np.maximum(sums, 1e-12), 0.0).astype(np.float32)
    return ad.neg(ad.tsum(ad.mul(ad.constant(t), ad.log_clipped(p, LOG_FLOOR))))


def normalized_entropy(values) -> float:
    """Entropy of a non-negative vector normalized to sum to one."""
    v = np.asarray(values, dtype=np.float64)
    s = v.sum()
    if s <= 0:
        return 0.0
    p = v / s
    return float(-(p * np.log(np.maximum(p, LOG_FLOOR))).sum())


# --- constraint sets ------------------------------------------------------------


@dataclass
class ConstraintSet:
    """Frozen per-ray geometry and cached network outputs for one edit."""

    pixels: np.ndarray       # (N, 2)
    is_fg: np.ndarray        # (N,) bool
    view_ids: np.ndarray     # (N,) int
    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray            # (N, S)
    delta: np.ndarray        # (N, S)
    points: np.ndarray       # (N*S, 3)
    gdir: np.ndarray         # (N, dir_dim)
    sigma: np.ndarray        # (N, S) pre-edit fine density
    bneck: np.ndarray        # (N*S, B) pre-edit fine bottleneck
    hsum: np.ndarray | None  # (N*S, W) pre-edit share+inst feature (shape edits)
    far: float

    @property
    def n_rays(self):
        return self.pixels.shape[0]

    @property
    def n_samples(self):
        return self.t.shape[1]


def build_constraints(params: FieldParameters, request: EditRequest, cameras,
                      settings: RenderSettings, rng: np.random.Generator,
                      need_hsum: bool) -> ConstraintSet:
    if not request.scribbles:
        raise EditError("edit request carries no scribbles")
    pixel_chunks, label_chunks, view_chunks = [], [], []
    for scribble in request.scribbles:
        camera = cameras[scribble.view_id]
        scribble.validate_bounds(camera.height, camera.width)
        px, lb = subsample_constraints(
            scribble, request.kind, rng,
            color_limit=request.hyper.color_ray_limit,
            shape_limit=request.hyper.shape_ray_limit)
        pixel_chunks.append(px)
        label_chunks.append(lb)
        view_chunks.append(np.full(px.shape[0], scribble.view_id, dtype=np.int64))
    pixels = np.concatenate(pixel_chunks)
    is_fg = np.concatenate(label_chunks)
    view_ids = np.concatenate(view_chunks)

    origins = np.empty((pixels.shape[0], 3), dtype=np.float32)
    dirs = np.empty_like(origins)
    near = far = None
    for vid in np.unique(view_ids):
        camera = cameras[vid]
        sel = view_ids == vid
        o, d, _ = generate_rays(camera, pixels[sel])
        origins[sel], dirs[sel] = o, d
        near, far = camera.near, camera.far

    z_s = params.shape_code(request.instance)
    n = origins.shape[0]
    with ad.inference_mode():
        t_c = stratified_samples(near, far, settings.n_coarse, n,
                                 u=rng.random((n, settings.n_coarse), dtype=np.float32))
        pts_c, _ = _sample_points(origins, dirs, t_c)
        _, sig_c = params.bottleneck_features("coarse", pts_c, z_s)
        sig_c = sig_c.data.reshape(n, settings.n_coarse)
        delta_c = deltas_for(t_c, far)
        alpha = 1.0 - np.exp(-sig_c * delta_c)
        trans = np.exp(-np.concatenate(
            [np.zeros((n, 1), dtype=np.float32),
             np.cumsum((sig_c * delta_c)[:, :-1], axis=1)], axis=1))
        t_f = hierarchical_samples(alpha * trans, t_c, settings.n_fine,
                                   u=rng.random((n, settings.n_fine)))
        t = merge_samples(t_c, t_f)
        points, _ = _sample_points(origins, dirs, t)
        bneck_t, sigma_t = params.bottleneck_features("fine", points, z_s)
        hsum = _fine_hsum(params, points, z_s) if need_hsum else None
    return ConstraintSet(
        pixels=pixels, is_fg=is_fg, view_ids=view_ids, origins=origins, dirs=dirs,
        t=t, delta=deltas_for(t, far), points=points,
        gdir=encode_position(dirs, params.config.dir_frequencies),
        sigma=sigma_t.data.reshape(n, t.shape[1]), bneck=bneck_t.data,
        hsum=hsum, far=far)


def _fine_hsum(params: FieldParameters, points: np.ndarray, z_s) -> np.ndarray:
    """Frozen share+inst trunk output at fixed points (shape-edit cache)."""
    gx = ad.constant(encode_position(points, params.config.pos_frequencies))
    h_inst = params._mlp("fine", "inst", [gx, params._embed("fine", "inst", z_s)])
    if params.config.use_shared_branch:
        return ad.add(params._mlp("fine", "share", [gx]), h_inst).data
    return h_inst.data


def _rows(arr: np.ndarray, n_samples: int, ray_idx: np.ndarray) -> np.ndarray:
    """Gather per-sample rows of an (N*S, D) array for the chosen rays."""
    cols = (ray_idx[:, None] * n_samples + np.arange(n_samples)[None, :]).ravel()
    return arr[cols]


def constraint_colors(params: FieldParameters, cset: ConstraintSet,
                      settings: RenderSettings, z_c) -> np.ndarray:
    """Composite the constraint rays from the cached shape-side outputs."""
    n, s = cset.sigma.shape
    with ad.inference_mode():
        gdir = ad.constant(np.repeat(cset.gdir, s, axis=0))
        color = params.radiance_head("fine", ad.constant(cset.bneck), z_c, gdir)
        res = composite(ad.constant(cset.sigma), color, cset.t, cset.delta,
                        settings.background, cset.far)
    return res.color.data.copy()


def donor_targets(params: FieldParameters, cset: ConstraintSet, ray_sel: np.ndarray,
                  donor_shape_code, color_code, settings: RenderSettings):
    """Colors and densities of the donor-coded field along selected
    constraint rays, evaluated at the same frozen sample positions."""
    n, s = cset.sigma.shape
    idx = np.flatnonzero(ray_sel)
    pts = _rows(cset.points, s, idx)
    with ad.inference_mode():
        bneck, sigma = params.bottleneck_features("fine", pts, donor_shape_code)
        gdir = ad.constant(np.repeat(cset.gdir[idx], s, axis=0))
        color = params.radiance_head("fine", bneck, color_code, gdir)
        res = composite(ad.reshape(sigma, (idx.size, s)), color, cset.t[idx],
                        cset.delta[idx], settings.background, cset.far)
    return res.color.data.copy(), sigma.data.reshape(idx.size, s).copy()


# --- the edit loop ---------------------------------------------------------------


def run_edit(params: FieldParameters, request: EditRequest, cameras,
             settings: RenderSettings | None = None,
             progress_cb=None, cancel_event=None,
             preview_views=None) -> EditResult:
    """Execute an edit request against live parameters.

    ``cameras`` maps view_id -> Camera for every view a scribble touches.
    Parameters are mutated in place; on a non-finite loss they are reverted
    and EditDiverged is raised. Cancelling reverts to the pre-edit state.
    """
    settings = settings or RenderSettings.desk()
    rng = np.random.default_rng(np.random.SeedSequence([request.hyper.seed, 0xED17]))
    started = time.time()
    k = request.instance
    trainable = select_trainable(params, request.kind, k, request.trainable_scope)
    names = [p.name for p in trainable]
    snapshot = params.store.snapshot(names)

    if request.kind in ("transfer_shape", "transfer_color"):
        previews = transfer_codes(params, k, request.source_instance,
                                  "shape" if request.kind == "transfer_shape" else "color",
                                  cameras if preview_views is None
                                  else {v: cameras[v] for v in preview_views},
                                  settings)
        return EditResult(request.kind, k, {}, {}, [], [], previews,
                          time.time() - started)

    use_cache = request.hyper.use_feature_cache and request.trainable_scope == "default"
    cset = build_constraints(params, request, cameras, settings, rng,
                             need_hsum=use_cache and request.kind in SHAPE_KINDS)
    pre_colors = constraint_colors(params, cset, settings, z_c=params.color_code(k))
    targets, density_targets = _edit_targets(params, request, cset, pre_colors, settings)

    state = _EditLoopState(params, request, cset, targets, density_targets,
                           snapshot, trainable, settings, rng, use_cache)
    adam = AdamState(learning_rate=request.hyper.learning_rate)
    loss_trace, iter_seconds = [], []
    cancelled = False
    for it in range(request.hyper.iterations):
        if cancel_event is not None and cancel_event.is_set():
            cancelled = True
            break
        tick = time.perf_counter()
        loss = state.step(adam)
        iter_seconds.append(time.perf_counter() - tick)
        if not np.isfinite(loss):
            params.store.restore(snapshot)
            params.note_updated(names)
            raise EditDiverged(f"non-finite loss at edit iteration {it}")
        loss_trace.append(loss)
        if progress_cb is not None:
            progress_cb(it + 1, request.hyper.iterations, loss)

    if cancelled:
        params.store.restore(snapshot)
        params.note_updated(names)
        return EditResult(request.kind, k, snapshot, snapshot, loss_trace,
                          iter_seconds, {}, time.time() - started, cancelled=True)

    params.note_updated(names)
    delta_new = params.store.snapshot(names)
    previews = {}
    for view_id in (preview_views if preview_views is not None
                    else sorted({s.view_id for s in request.scribbles})):
        previews[view_id] = render_view_seeded(params, cameras[view_id], k, view_id,
                                               settings=settings)
    return EditResult(request.kind, k, snapshot, delta_new, loss_trace,
                      iter_seconds, previews, time.time() - started)


def _edit_targets(params, request, cset, pre_colors, settings):
    """Per-ray color targets (and density targets for the density variant)."""
    k = request.instance
    targets = pre_colors.copy()  # bg rays keep their captured colors
    density_targets = None
    fg = cset.is_fg
    if request.kind == "color":
        per_pixel = _per_pixel_targets(request, cset)
        targets[fg] = per_pixel
    elif request.kind == "shape_remove":
        targets[fg] = np.asarray(settings.background, dtype=np.float32)
    elif request.kind == "shape_remove_occluded":
        targets[fg] = _zeroed_mode_colors(params, cset, fg, k, settings)
    elif request.kind in ("shape_add", "shape_add_density"):
        donor_colors, donor_sigma = donor_targets(
            params, cset, fg, params.shape_code(request.source_instance),
            params.color_code(k), settings)
        targets[fg] = donor_colors
        if request.kind == "shape_add_density":
            density_targets = cset.sigma.copy()
            density_targets[fg] = donor_sigma
    return targets, density_targets


def _per_pixel_targets(request, cset):
    fg_idx = np.flatnonzero(cset.is_fg)
    out = np.empty((fg_idx.size, 3), dtype=np.float32)
    if request.target_color is not None:
        out[:] = np.asarray(request.target_color, dtype=np.float32)
    by_view = {s.view_id: s for s in request.scribbles}
    for i, ridx in enumerate(fg_idx):
        s = by_view[int(cset.view_ids[ridx])]
        if s.fg_colors is not None:
            match = np.flatnonzero((s.fg == cset.pixels[ridx]).all(axis=1))
            if match.size:
                out[i] = s.fg_colors[match[0]]
    return out


def _zeroed_mode_colors(params, cset, fg, instance, settings):
    idx = np.flatnonzero(fg)
    s = cset.n_samples
    sigma_edit = first_mode_zeroing(cset.sigma[idx])
    with ad.inference_mode():
        gdir = ad.constant(np.repeat(cset.gdir[idx], s, axis=0))
        color = params.radiance_head("fine", ad.constant(_rows(cset.bneck, s, idx)),
                                     params.color_code(instance), gdir)
        res = composite(ad.constant(sigma_edit), color, cset.t[idx], cset.delta[idx],
                        settings.background, cset.far)
    return res.color.data.copy()


class _EditLoopState:
    """One edit optimization; builds the per-iteration loss graph."""

    def __init__(self, params, request, cset, targets, density_targets,
                 snapshot, trainable, settings, rng, use_cache):
        self.params = params
        self.request = request
        self.cset = cset
        self.targets = targets
        self.density_targets = density_targets
        self.snapshot = snapshot
        self.trainable = trainable
        self.settings = settings
        self.rng = rng
        self.use_cache = use_cache
        self.k = request.instance
        # Constants reused every iteration.
        if use_cache and request.kind in SHAPE_KINDS:
            z_s = params.shape_code(self.k)
            e_fuse = ad.relu(ad.linear(z_s, params.store["fine/embed_fuse/weight"],
                                       params.store["fine/embed_fuse/bias"]))
            self.e_fuse = np.ascontiguousarray(e_fuse.data)

    def step(self, adam: AdamState) -> float:
        req = self.request
        cset = self.cset
        if req.kind == "color":
            ray_idx = np.arange(cset.n_rays)
        else:
            n = min(req.hyper.batch_rays, cset.n_rays)
            ray_idx = self.rng.choice(cset.n_rays, size=n, replace=False)

        loss = self._loss_for(ray_idx)
        if req.hyper.lambda_reg > 0:
            loss = ad.add(loss, reg_loss(self.params, self.snapshot)
                          * req.hyper.lambda_reg)
        value = loss.item()
        if not np.isfinite(value):
            return value
        ad.zero_grads(self.trainable)
        loss.backward()
        adam_step(adam, self.trainable)
        ad.zero_grads(self.trainable)
        return value

    # -- per-kind loss graphs --

    def _loss_for(self, ray_idx) -> ad.Tensor:
        kind = self.request.kind
        if kind == "color":
            colors = self._color_forward(ray_idx)
            return reconstruction_loss(colors, self.targets[ray_idx])
        sigma, colors = self._shape_forward(ray_idx)
        if kind == "shape_add_density":
            return density_cross_entropy_loss(sigma, self.density_targets[ray_idx])
        loss = reconstruction_loss(colors, self.targets[ray_idx])
        if kind in ("shape_remove", "shape_remove_occluded") \
                and self.request.hyper.lambda_dens > 0:
            fg_local = np.flatnonzero(self.cset.is_fg[ray_idx])
            if fg_local.size:
                sigma_fg = ad.gather_rows(sigma, fg_local)
                loss = ad.add(loss, density_entropy_loss(sigma_fg)
                              * self.request.hyper.lambda_dens)
        return loss

    def _color_forward(self, ray_idx) -> ad.Tensor:
        cset, params = self.cset, self.params
        s = cset.n_samples
        gdir = ad.constant(np.repeat(cset.gdir[ray_idx], s, axis=0))
        z_c = params.color_code(self.k)
        if self.use_cache:
            bneck = ad.constant(_rows(cset.bneck, s, ray_idx))
            sigma = ad.constant(cset.sigma[ray_idx])
        else:
            pts = _rows(cset.points, s, ray_idx)
            bneck_t, sigma_t = params.bottleneck_features("fine", pts,
                                                          params.shape_code(self.k))
            bneck = bneck_t
            sigma = ad.reshape(sigma_t, (ray_idx.size, s))
        color = params.radiance_head("fine", bneck, z_c, gdir)
        res = composite(sigma, color, cset.t[ray_idx], cset.delta[ray_idx],
                        self.settings.background, cset.far)
        return res.color

    def _shape_forward(self, ray_idx):
        """(sigma (B, S) graph tensor, composited colors (B, 3))."""
        cset, params = self.cset, self.params
        s = cset.n_samples
        b = ray_idx.size
        pts = _rows(cset.points, s, ray_idx)
        if self.use_cache:
            gx = ad.constant(encode_position(pts, params.config.pos_frequencies))
            hsum = ad.constant(_rows(cset.hsum, s, ray_idx))
            fused = params._mlp("fine", "fuse", [hsum, gx, ad.constant(self.e_fuse)])
            sigma_flat = ad.softplus(ad.linear(fused, params.store["fine/dens/weight"],
                                               params.store["fine/dens/bias"]))
            bneck = ad.linear(fused, params.store["fine/bneck/weight"],
                              params.store["fine/bneck/bias"])
        else:
            bneck, sigma_flat = params.bottleneck_features(
                "fine", pts, params.shape_code(self.k))
        sigma = ad.reshape(sigma_flat, (b, s))
        if self.request.kind == "shape_add_density":
            return sigma, None  # density-only objective skips rendering
        gdir = ad.constant(np.repeat(cset.gdir[ray_idx], s, axis=0))
        color = params.radiance_head("fine", bneck, params.color_code(self.k), gdir)
        res = composite(sigma, color, cset.t[ray_idx], cset.delta[ray_idx],
                        self.settings.background, cset.far)
        return sigma, res.color


def transfer_codes(params: FieldParameters, instance: int, donor: int,
                   what: str, cameras, settings: RenderSettings,
                   seed: int = 0) -> dict:
    """Preview renders with swapped codes; parameters are untouched."""
    params._check_instance(donor)
    if what == "color":
        codes = (params.shape_code(instance), params.color_code(donor))
    elif what == "shape":
        codes = (params.shape_code(donor), params.color_code(instance))
    else:
        raise EditError(f"transfer must move 'shape' or 'color', got {what!r}")
    previews = {}
    from .render import render_view, _view_seed

    for view_id, camera in cameras.items():
        previews[view_id] = render_view(params, camera, codes=codes,
                                        settings=settings,
                                        seed=_view_seed(seed, view_id))
    return previews


def apply_transfer(params: FieldParameters, instance: int, donor: int, what: str):
    """Commit a code swap; returns (old, new) snapshots for undo."""
    row = params.color_code(instance) if what == "color" else params.shape_code(instance)
    donor_row = params.color_code(donor) if what == "color" else params.shape_code(donor)
    old = {row.name: row.data.copy()}
    row.data = donor_row.data.copy()
    params.note_updated([row.name])
    return old, {row.name: row.data.copy()}
