"""Ray generation, stratified/hierarchical sampling, compositing, and the
bottleneck feature cache used by color edits.

Compositing follows the front-to-back over-operator with one deliberate
quirk: the sum runs to the next-to-last sample only (the final sample's
weight is computed but contributes nothing), and the unused transmittance
is completed with a background color (white by default, matching datasets
whose empty space is white). Depth is the expected termination distance
under the same weights, completed with the far plane.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tensor
from .field import FieldParameters, encode_position


class StaleCacheError(RuntimeError):
    """A feature cache was used after shape-side parameters changed."""


@dataclass
class Camera:
    pose: np.ndarray  # 4x4 camera-to-world, right/up/back convention
    focal: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError(f"camera pose must be 4x4, got {self.pose.shape}")
        r = self.pose[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-4:
            raise ValueError("camera rotation block is not orthonormal")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.tolist(),
            "focal": self.focal,
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.asarray(d["pose"]), d["focal"], d["width"], d["height"],
                   d["near"], d["far"])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Camera":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def look_at_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward  # camera looks along -z
    pose[:3, 3] = position
    return pose


def generate_rays(camera: Camera, pixels: np.ndarray | None = None):
    """Pinhole rays through pixel centers.

    ``pixels`` is an optional (M, 2) array of (row, col); by default all
    pixels in row-major order. Returns (origins (M, 3), unit dirs (M, 3),
    pixels (M, 2)).
    """
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width),
                                 indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    else:
        pixels = np.asarray(pixels, dtype=np.int64)
        if pixels.ndim != 2 or pixels.shape[1] != 2:
            raise ValueError(f"pixels must be (M, 2), got {pixels.shape}")
    r = pixels[:, 0].astype(np.float64)
    c = pixels[:, 1].astype(np.float64)
    x = (c - (camera.width - 1) / 2.0) / camera.focal
    y = -(r - (camera.height - 1) / 2.0) / camera.focal
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
    dirs = dirs_cam @ camera.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], dirs.shape).copy()
    return origins.astype(np.float32), dirs.astype(np.float32), pixels


def stratified_samples(near: float, far: float, count: int, n_rays: int,
                       rng: np.random.Generator | None = None,
                       u: np.ndarray | None = None,
                       midpoint: bool = False) -> np.ndarray:
    """One uniform draw per equal-width bin of [near, far], per ray.

    ``u`` may carry precomputed jitter in [0, 1) so tiles of one view can
    share a single deterministic jitter table; ``midpoint=True`` is the
    deterministic mode used by tests.
    """
    if count < 2:
        raise ValueError("need at least 2 samples per ray")
    edges = np.linspace(near, far, count + 1, dtype=np.float32)
    width = (far - near) / count
    if midpoint:
        u = np.full((n_rays, count), 0.5, dtype=np.float32)
    elif u is None:
        rng = np.random.default_rng() if rng is None else rng
        u = rng.random((n_rays, count), dtype=np.float32)
    return edges[None, :-1] + u * width


def sample_pdf(t_bins: np.ndarray, weights: np.ndarray, n_samples: int,
               rng: np.random.Generator | None = None,
               u: np.ndarray | None = None) -> np.ndarray:
    """Inverse-transform samples from the piecewise-constant pdf over the
    bins [t_i, t_{i+1}) with mass proportional to ``weights`` (R, B).

    Rows whose weights sum to ~zero fall back to a uniform pdf. Output is
    sorted ascending per row.
    """
    t_bins = np.asarray(t_bins, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n_rays, n_bins = w.shape
    if t_bins.shape != (n_rays, n_bins + 1):
        raise ValueError(f"bins {t_bins.shape} inconsistent with weights {w.shape}")
    total = w.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] < 1e-12
    if degenerate.any():
        w = w.copy()
        w[degenerate] = 1.0
        total = w.sum(axis=1, keepdims=True)
    pdf = w / total
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if u is None:
        rng = np.random.default_rng() if rng is None else rng
        u = rng.random((n_rays, n_samples))
    u = np.clip(u, 0.0, 1.0 - 1e-9)

    # Batched searchsorted: offset each row into its own disjoint range.
    offsets = 2.0 * np.arange(n_rays)[:, None]
    flat_cdf = (cdf + offsets).ravel()
    flat_u = (u + offsets).ravel()
    idx = np.searchsorted(flat_cdf, flat_u, side="right") - 1
    idx -= np.repeat(np.arange(n_rays), n_samples) * (n_bins + 1)
    idx = np.clip(idx.reshape(n_rays, n_samples), 0, n_bins - 1)

    rows = np.arange(n_rays)[:, None]
    cdf_lo = np.take_along_axis(cdf, idx, axis=1)
    cdf_hi = np.take_along_axis(cdf, idx + 1, axis=1)
    span = np.where(cdf_hi - cdf_lo < 1e-12, 1.0, cdf_hi - cdf_lo)
    frac = (u - cdf_lo) / span
    t_lo = np.take_along_axis(t_bins, idx, axis=1)
    t_hi = np.take_along_axis(t_bins, idx + 1, axis=1)
    del rows
    return np.sort(t_lo + frac * (t_hi - t_lo), axis=1).astype(np.float32)


def hierarchical_samples(coarse_weights: np.ndarray, coarse_t: np.ndarray,
                         n_fine: int, rng: np.random.Generator | None = None,
                         u: np.ndarray | None = None) -> np.ndarray:
    """Fine-pass t values drawn from the coarse compositing weights.

    Bin i spans [t_i, t_{i+1}); its mass is the coarse weight of sample i
    (the last coarse weight has no bin and is dropped).
    """
    if (np.asarray(coarse_weights) < 0).any():
        raise ValueError("coarse weights must be non-negative")
    return sample_pdf(coarse_t, np.asarray(coarse_weights)[:, :-1], n_fine, rng=rng, u=u)


def merge_samples(t_coarse: np.ndarray, t_fine: np.ndarray) -> np.ndarray:
    return np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)


def deltas_for(t: np.ndarray, far: float) -> np.ndarray:
    """delta_i = t_{i+1} - t_i, with the final delta closed by the far plane."""
    d = np.empty_like(t)
    d[:, :-1] = t[:, 1:] - t[:, :-1]
    d[:, -1] = far - t[:, -1]
    return np.maximum(d, 1e-8)


@dataclass
class CompositeResult:
    color: Tensor    # (R, 3)
    depth: Tensor    # (R, 1)
    opacity: Tensor  # (R, 1)
    alpha: Tensor    # (R, S)
    weights: Tensor  # (R, S)


def composite(sigma: Tensor, color: Tensor, t: np.ndarray, delta: np.ndarray,
              background, far: float) -> CompositeResult:
    """Front-to-back compositing of per-sample density/radiance.

    ``sigma`` is (R, S), ``color`` is (R*S, 3) in sample-major order, ``t``
    and ``delta`` are (R, S) constants. Only samples 1..S-1 contribute to
    the pixel; leftover transmittance is filled with ``background``.
    """
    n_rays, n_samples = sigma.data.shape
    if not np.isfinite(sigma.data).all():
        raise ad.NonFiniteError("composite received non-finite densities")
    sd = ad.mul(sigma, ad.constant(delta.astype(sigma.data.dtype)))
    alpha = ad.sub(ad.constant(np.ones((1,), dtype=sigma.data.dtype)),
                   ad.exp(ad.neg(sd)))
    trans = ad.exp(ad.neg(ad.cumsum_exclusive(sd)))
    weights = ad.mul(alpha, trans)

    used = ad.slice_cols(weights, 0, n_samples - 1)
    opacity = ad.tsum(used, axis=1, keepdims=True)
    leftover = ad.sub(ad.constant(np.ones((1,), dtype=sigma.data.dtype)), opacity)

    background = np.asarray(background, dtype=sigma.data.dtype).reshape(3)
    channels = []
    for ch in range(3):
        c_ch = ad.reshape(ad.slice_cols(color, ch, ch + 1), (n_rays, n_samples))
        c_used = ad.slice_cols(c_ch, 0, n_samples - 1)
        raw = ad.tsum(ad.mul(c_used, used), axis=1, keepdims=True)
        channels.append(ad.add(raw, leftover * float(background[ch])))
    out_color = ad.concat(channels, axis=1)

    t_used = ad.constant(t[:, : n_samples - 1].astype(sigma.data.dtype))
    depth = ad.add(ad.tsum(ad.mul(t_used, used), axis=1, keepdims=True),
                   leftover * float(far))
    return CompositeResult(out_color, depth, opacity, alpha, weights)


def composite_arrays(sigma: np.ndarray, color: np.ndarray, t: np.ndarray,
                     delta: np.ndarray, background, far: float):
    """Numpy-in/numpy-out wrapper around ``composite``."""
    r, s = sigma.shape
    with ad.inference_mode():
        res = composite(ad.constant(sigma), ad.constant(color.reshape(r * s, 3)),
                        t, delta, background, far)
    return (res.color.data, res.depth.data[:, 0], res.opacity.data[:, 0],
            res.alpha.data, res.weights.data)


@dataclass
class RenderSettings:
    n_coarse: int = 64
    n_fine: int = 128
    background: tuple = (1.0, 1.0, 1.0)
    tile_rays: int = 2048

    @classmethod
    def desk(cls, **overrides) -> "RenderSettings":
        defaults = dict(n_coarse=32, n_fine=32)
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class RenderedView:
    rgb: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray    # (H, W)
    opacity: np.ndarray  # (H, W)

    def save_rgb(self, path) -> None:
        save_png(self.rgb, path)

    def save_depth(self, path, far: float) -> None:
        save_depth_png(self.depth, path, far)


def save_png(rgb: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_depth_png(depth: np.ndarray, path, far: float) -> None:
    """16-bit depth normalized by the far plane, with a JSON sidecar."""
    scaled = np.clip(np.asarray(depth, dtype=np.float64) / far, 0.0, 1.0)
    Image.fromarray((scaled * 65535.0 + 0.5).astype(np.uint16)).save(path)
    with open(str(path) + ".json", "w") as f:
        json.dump({"far": far, "scale": far / 65535.0}, f, sort_keys=True)


def _jitter_tables(seed: int, n_rays: int, n_coarse: int, n_fine: int):
    """Per-view deterministic jitter; sliced per tile so tiling order never
    changes the image."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    u_coarse = rng.random((n_rays, n_coarse), dtype=np.float32)
    u_fine = rng.random((n_rays, n_fine))
    return u_coarse, u_fine


def render_rays(params: FieldParameters, origins: np.ndarray, dirs: np.ndarray,
                z_s, z_c, camera_near: float, camera_far: float,
                settings: RenderSettings, seed: int = 0,
                quality: str = "full", midpoint: bool = False):
    """Render arbitrary rays; returns (rgb (R,3), depth (R,), opacity (R,))."""
    n = origins.shape[0]
    u_c, u_f = _jitter_tables(seed, n, settings.n_coarse, settings.n_fine)
    rgb = np.empty((n, 3), dtype=np.float32)
    depth = np.empty(n, dtype=np.float32)
    opacity = np.empty(n, dtype=np.float32)
    with ad.inference_mode():
        for start in range(0, n, settings.tile_rays):
            stop = min(start + settings.tile_rays, n)
            res = _render_tile(params, origins[start:stop], dirs[start:stop],
                               z_s, z_c, camera_near, camera_far, settings,
                               u_c[start:stop], u_f[start:stop], quality, midpoint)
            rgb[start:stop] = res[0]
            depth[start:stop] = res[1]
            opacity[start:stop] = res[2]
    return rgb, depth, opacity


def _render_tile(params, origins, dirs, z_s, z_c, near, far, settings,
                 u_c, u_f, quality, midpoint):
    n = origins.shape[0]
    t_c = stratified_samples(near, far, settings.n_coarse, n, u=u_c, midpoint=midpoint)
    if quality == "coarse":
        t = t_c
        net = "coarse"
    elif quality == "full":
        sigma_c = _field_sigma(params, "coarse", origins, dirs, t_c, z_s)
        delta_c = deltas_for(t_c, far)
        alpha = 1.0 - np.exp(-sigma_c * delta_c)
        trans = np.exp(-np.concatenate(
            [np.zeros((n, 1), dtype=np.float32),
             np.cumsum((sigma_c * delta_c)[:, :-1], axis=1)], axis=1))
        weights_c = alpha * trans
        t_f = hierarchical_samples(weights_c, t_c, settings.n_fine, u=u_f)
        t = merge_samples(t_c, t_f)
        net = "fine"
    else:
        raise ValueError(f"quality must be 'coarse' or 'full', got {quality!r}")

    sigma, color = _field_outputs(params, net, origins, dirs, t, z_s, z_c)
    delta = deltas_for(t, far)
    res = composite(sigma, color, t, delta, settings.background, far)
    return res.color.data, res.depth.data[:, 0], res.opacity.data[:, 0]


def _sample_points(origins, dirs, t):
    n, s = t.shape
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    return pts.reshape(n * s, 3), np.repeat(dirs, s, axis=0)


def _field_sigma(params, net, origins, dirs, t, z_s):
    pts, _ = _sample_points(origins, dirs, t)
    _, sigma = params.bottleneck_features(net, pts, z_s)
    return sigma.data.reshape(t.shape)


def _field_outputs(params, net, origins, dirs, t, z_s, z_c):
    pts, dirs_rep = _sample_points(origins, dirs, t)
    gd = np.repeat(encode_position(dirs, params.config.dir_frequencies),
                   t.shape[1], axis=0)
    color, sigma = params.forward(net, pts, dirs_rep, z_s, z_c, gd=gd)
    return ad.reshape(sigma, t.shape), color


def render_view(params: FieldParameters, camera: Camera,
                instance: int | None = None, codes=None,
                settings: RenderSettings | None = None, seed: int = 0,
                quality: str = "full", midpoint: bool = False) -> RenderedView:
    """Render a full camera view; ``codes`` overrides the instance lookup
    with an explicit (shape_code, color_code) tensor pair."""
    settings = settings or RenderSettings()
    if codes is None:
        if instance is None:
            raise ValueError("render_view needs an instance index or explicit codes")
        z_s, z_c = params.shape_code(instance), params.color_code(instance)
    else:
        z_s, z_c = codes
    origins, dirs, _ = generate_rays(camera)
    rgb, depth, opacity = render_rays(params, origins, dirs, z_s, z_c,
                                      camera.near, camera.far, settings,
                                      seed=seed, quality=quality, midpoint=midpoint)
    h, w = camera.height, camera.width
    return RenderedView(rgb.reshape(h, w, 3), depth.reshape(h, w), opacity.reshape(h, w))


@dataclass
class ViewFeatures:
    t: np.ndarray        # (R, S)
    delta: np.ndarray    # (R, S)
    sigma: np.ndarray    # (R, S) fine densities
    bneck: np.ndarray    # (R*S, B) fine bottleneck features
    gdir: np.ndarray     # (R, dir_dim) encoded per-ray directions
    shape: tuple         # (H, W)


@dataclass
class FeatureCache:
    """Per-view bottleneck features for fast radiance-only re-rendering.

    Valid while shape-side parameters are untouched; any shape edit bumps
    the owning model's shape version and the cache refuses to serve.
    """
    instance: int
    shape_version: int
    far: float
    views: dict = dc_field(default_factory=dict)

    def check_fresh(self, params: FieldParameters) -> None:
        if params.shape_version != self.shape_version:
            raise StaleCacheError(
                f"feature cache built at shape version {self.shape_version}, "
                f"parameters now at {params.shape_version}"
            )


def build_feature_cache(params: FieldParameters, cameras: dict, instance: int,
                        settings: RenderSettings | None = None,
                        seed: int = 0) -> FeatureCache:
    """Precompute fine-pass features for every camera in ``cameras``
    (a mapping view_id -> Camera). Uses the same per-view jitter seeds as
    ``render_view`` so cached and uncached renders agree exactly."""
    settings = settings or RenderSettings()
    z_s = params.shape_code(instance)
    far = None
    cache = FeatureCache(instance=instance, shape_version=params.shape_version, far=0.0)
    with ad.inference_mode():
        for view_id, camera in cameras.items():
            origins, dirs, _ = generate_rays(camera)
            n = origins.shape[0]
            u_c, u_f = _jitter_tables(_view_seed(seed, view_id), n,
                                      settings.n_coarse, settings.n_fine)
            feats = _view_features(params, origins, dirs, z_s, camera, settings, u_c, u_f)
            cache.views[view_id] = feats
            far = camera.far
    cache.far = far if far is not None else 0.0
    return cache


def _view_seed(seed: int, view_id) -> int:
    # zlib.crc32 rather than hash(): stable across processes.
    tag = zlib.crc32(str(view_id).encode("utf-8"))
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _view_features(params, origins, dirs, z_s, camera, settings, u_c, u_f) -> ViewFeatures:
    n = origins.shape[0]
    bneck_dim = params.config.bottleneck_dim
    s_total = settings.n_coarse + settings.n_fine
    t_all = np.empty((n, s_total), dtype=np.float32)
    sig_all = np.empty((n, s_total), dtype=np.float32)
    bneck_all = np.empty((n * s_total, bneck_dim), dtype=np.float32)
    for start in range(0, n, settings.tile_rays):
        stop = min(start + settings.tile_rays, n)
        o, d = origins[start:stop], dirs[start:stop]
        m = stop - start
        t_c = stratified_samples(camera.near, camera.far, settings.n_coarse, m,
                                 u=u_c[start:stop])
        sigma_c = _field_sigma(params, "coarse", o, d, t_c, z_s)
        delta_c = deltas_for(t_c, camera.far)
        alpha = 1.0 - np.exp(-sigma_c * delta_c)
        trans = np.exp(-np.concatenate(
            [np.zeros((m, 1), dtype=np.float32),
             np.cumsum((sigma_c * delta_c)[:, :-1], axis=1)], axis=1))
        t_f = hierarchical_samples(alpha * trans, t_c, settings.n_fine, u=u_f[start:stop])
        t = merge_samples(t_c, t_f)
        pts, _ = _sample_points(o, d, t)
        bneck, sigma = params.bottleneck_features("fine", pts, z_s)
        t_all[start:stop] = t
        sig_all[start:stop] = sigma.data.reshape(m, s_total)
        bneck_all[start * s_total : stop * s_total] = bneck.data
    gdir = encode_position(dirs, params.config.dir_frequencies)
    return ViewFeatures(t=t_all, delta=deltas_for(t_all, camera.far), sigma=sig_all,
                        bneck=bneck_all, gdir=gdir,
                        shape=(camera.height, camera.width))


def cached_render(cache: FeatureCache, params: FieldParameters, view_id,
                  settings: RenderSettings | None = None,
                  z_c=None) -> RenderedView:
    """Re-render a cached view by re-running only the radiance head."""
    cache.check_fresh(params)
    settings = settings or RenderSettings()
    feats = cache.views[view_id]
    z_c = params.color_code(cache.instance) if z_c is None else z_c
    n, s = feats.t.shape
    rgb = np.empty((n, 3), dtype=np.float32)
    depth = np.empty(n, dtype=np.float32)
    opacity = np.empty(n, dtype=np.float32)
    with ad.inference_mode():
        for start in range(0, n, settings.tile_rays):
            stop = min(start + settings.tile_rays, n)
            m = stop - start
            bneck = ad.constant(feats.bneck[start * s : stop * s])
            gdir = ad.constant(np.repeat(feats.gdir[start:stop], s, axis=0))
            color = params.radiance_head("fine", bneck, z_c, gdir)
            res = composite(ad.constant(feats.sigma[start:stop]), color,
                            feats.t[start:stop], feats.delta[start:stop],
                            settings.background, cache.far)
            rgb[start:stop] = res.color.data
            depth[start:stop] = res.depth.data[:, 0]
            opacity[start:stop] = res.opacity.data[:, 0]
    h, w = feats.shape
    return RenderedView(rgb.reshape(h, w, 3), depth.reshape(h, w), opacity.reshape(h, w))


def render_view_seeded(params, camera, instance, view_id, settings=None,
                       seed: int = 0, quality: str = "full") -> RenderedView:
    """render_view with the per-view jitter seed used by the cache builder,
    so cached and uncached renders of the same view are comparable."""
    return render_view(params, camera, instance=instance, settings=settings,
                       seed=_view_seed(seed, view_id), quality=quality)
