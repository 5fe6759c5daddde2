"""Conditional radiance field: modular subnetworks over latent codes.

The field maps (position x, direction d, shape code, color code) to
(radiance, density). Geometry flows through a shared trunk plus an
instance-specific trunk fused into a single feature; density is a linear
head on the fused feature and is independent of both the viewing direction
and the color code by construction. Radiance is a small head on a narrow
bottleneck of the fused feature, concatenated with the embedded color code
and the encoded direction — that bottleneck is what the color-edit cache
stores.

Each model holds a coarse and a fine copy of every subnetwork; the
per-instance code tables are shared between the two.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Parameter, ParamStore, Tensor
from .checkpoint import CheckpointError, load_records, save_records

NETS = ("coarse", "fine")

# Subnetwork prefixes whose parameters shape geometry (density path). Any
# change bumps the shape version and invalidates bottleneck/density caches.
SHAPE_SIDE = ("share", "inst", "fuse", "dens", "bneck", "embed_inst", "embed_fuse")
COLOR_SIDE = ("rad", "embed_rad")


@dataclass
class FieldConfig:
    pos_frequencies: int = 10
    dir_frequencies: int = 4
    trunk_depth: int = 4
    trunk_width: int = 256
    code_dim: int = 32
    bottleneck_dim: int = 8
    instance_count: int = 1
    use_shared_branch: bool = True
    separate_codes: bool = True

    def __post_init__(self):
        if self.code_dim <= 0 or self.bottleneck_dim <= 0:
            raise ValueError("code_dim and bottleneck_dim must be positive")
        if self.instance_count < 1:
            raise ValueError("instance_count must be >= 1")

    @classmethod
    def desk(cls, instance_count: int, **overrides) -> "FieldConfig":
        """Small preset that trains in minutes on a CPU."""
        defaults = dict(trunk_width=64, instance_count=instance_count)
        defaults.update(overrides)
        return cls(**defaults)

    @classmethod
    def ablation(cls, variant: str, instance_count: int, **overrides) -> "FieldConfig":
        """The model ladder: 'single' (one joint code, no shared trunk),
        'split' (shape/color codes, no shared trunk), 'full'."""
        if variant == "full":
            flags = dict(use_shared_branch=True, separate_codes=True)
        elif variant == "split":
            flags = dict(use_shared_branch=False, separate_codes=True)
        elif variant == "single":
            flags = dict(use_shared_branch=False, separate_codes=False, code_dim=64)
        else:
            raise ValueError(f"unknown variant {variant!r}; expected full|split|single")
        flags.update(overrides)
        return cls(instance_count=instance_count, **flags)

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_frequencies

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_frequencies

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        return cls(**d)


def encode_position(p: np.ndarray, frequencies: int) -> np.ndarray:
    """(N, 3) -> (N, 3 + 6 L): raw input then sin/cos pairs per octave.

    Layout is [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p),
    cos(2^{L-1} pi p)]; checkpoint compatibility depends on this ordering.
    """
    p = np.asarray(p, dtype=np.float32)
    if frequencies == 0:
        return p.copy()
    n = p.shape[0]
    out = np.empty((n, 3 + 6 * frequencies), dtype=np.float32)
    out[:, :3] = p
    freqs = np.pi * 2.0 ** np.arange(frequencies, dtype=np.float32)
    scaled = p[:, None, :] * freqs[None, :, None]
    view = out[:, 3:].reshape(n, frequencies, 2, 3)
    np.sin(scaled, out=view[:, :, 0, :])
    np.cos(scaled, out=view[:, :, 1, :])
    return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


class FieldParameters:
    """All weights of one conditional radiance field plus code tables."""

    def __init__(self, config: FieldConfig, rng: np.random.Generator | None = None,
                 _empty: bool = False):
        self.config = config
        self.store = ParamStore()
        self.shape_version = 0
        self.color_version = 0
        if _empty:
            return
        rng = np.random.default_rng(0) if rng is None else rng
        for net in NETS:
            self._build_net(net, rng)
        self._build_codes(rng, config.instance_count)

    # --- construction -----------------------------------------------------

    def _add_linear(self, name: str, fan_in: int, fan_out: int, rng) -> None:
        self.store.add(Parameter(f"{name}/weight", _glorot(rng, fan_in, fan_out)))
        self.store.add(Parameter(f"{name}/bias", np.zeros(fan_out, dtype=np.float32)))

    def _add_mlp(self, prefix: str, fan_in: int, width: int, depth: int, rng) -> None:
        for i in range(depth):
            self._add_linear(f"{prefix}/layer{i}", fan_in if i == 0 else width, width, rng)

    def _build_net(self, net: str, rng) -> None:
        cfg = self.config
        w, c, p = cfg.trunk_width, cfg.code_dim, cfg.pos_dim
        if cfg.use_shared_branch:
            self._add_mlp(f"{net}/share", p, w, cfg.trunk_depth, rng)
        self._add_linear(f"{net}/embed_inst", c, c, rng)
        self._add_mlp(f"{net}/inst", p + c, w, cfg.trunk_depth, rng)
        self._add_linear(f"{net}/embed_fuse", c, c, rng)
        self._add_mlp(f"{net}/fuse", w + p + c, w, cfg.trunk_depth, rng)
        self._add_linear(f"{net}/dens", w, 1, rng)
        self._add_linear(f"{net}/bneck", w, cfg.bottleneck_dim, rng)
        self._add_linear(f"{net}/embed_rad", c, c, rng)
        self._add_linear(f"{net}/rad/layer0", cfg.bottleneck_dim + c + cfg.dir_dim, w, rng)
        self._add_linear(f"{net}/rad/layer1", w, 3, rng)

    def _code_init(self, rng) -> np.ndarray:
        return (rng.normal(0.0, 0.01, size=(1, self.config.code_dim))).astype(np.float32)

    def _build_codes(self, rng, count: int) -> None:
        for k in range(count):
            self._add_instance_codes(k, rng)

    def _add_instance_codes(self, k: int, rng) -> None:
        if self.config.separate_codes:
            self.store.add(Parameter(f"codes/shape/{k:04d}", self._code_init(rng)))
            self.store.add(Parameter(f"codes/color/{k:04d}", self._code_init(rng)))
        else:
            self.store.add(Parameter(f"codes/joint/{k:04d}", self._code_init(rng)))

    def add_instance(self, rng: np.random.Generator) -> int:
        """Append fresh code rows for a new instance; returns its index."""
        k = self.config.instance_count
        self._add_instance_codes(k, rng)
        self.config.instance_count = k + 1
        self.note_updated([])
        return k

    # --- code access --------------------------------------------------------

    def _check_instance(self, k: int) -> None:
        if not 0 <= k < self.config.instance_count:
            raise IndexError(f"instance {k} out of range [0, {self.config.instance_count})")

    def shape_code(self, k: int) -> Parameter:
        self._check_instance(k)
        family = "shape" if self.config.separate_codes else "joint"
        return self.store[f"codes/{family}/{k:04d}"]

    def color_code(self, k: int) -> Parameter:
        self._check_instance(k)
        family = "color" if self.config.separate_codes else "joint"
        return self.store[f"codes/{family}/{k:04d}"]

    # --- parameter grouping -------------------------------------------------

    def net_params(self, net: str | None = None):
        prefixes = NETS if net is None else (net,)
        return self.store.with_prefix(*(f"{p}/" for p in prefixes))

    def code_params(self, k: int):
        if self.config.separate_codes:
            return [self.shape_code(k), self.color_code(k)]
        return [self.shape_code(k)]

    def all_code_params(self):
        return self.store.with_prefix("codes/")

    def note_updated(self, names) -> None:
        """Record parameter mutation so caches/ETags can detect staleness."""
        shape_hit = color_hit = False
        for name in names:
            if name.startswith("codes/shape/") or name.startswith("codes/joint/"):
                shape_hit = True
            if name.startswith("codes/color/") or name.startswith("codes/joint/"):
                color_hit = True
            parts = name.split("/")
            if len(parts) >= 2 and parts[0] in NETS:
                if parts[1] in SHAPE_SIDE:
                    shape_hit = True
                elif parts[1] in COLOR_SIDE:
                    color_hit = True
        self.shape_version += int(shape_hit)
        self.color_version += int(color_hit)

    @property
    def version(self) -> tuple[int, int]:
        return (self.shape_version, self.color_version)

    # --- forward ------------------------------------------------------------

    def _mlp(self, net: str, sub: str, first_parts) -> Tensor:
        """Trunk MLP; the first layer consumes ``first_parts`` without
        materializing their concatenation."""
        h = ad.relu(ad.linear_parts(first_parts,
                                    self.store[f"{net}/{sub}/layer0/weight"],
                                    self.store[f"{net}/{sub}/layer0/bias"]))
        for i in range(1, self.config.trunk_depth):
            h = ad.relu(ad.linear(h, self.store[f"{net}/{sub}/layer{i}/weight"],
                                  self.store[f"{net}/{sub}/layer{i}/bias"]))
        return h

    def _embed(self, net: str, site: str, z: Tensor) -> Tensor:
        """Code injection: linear + ReLU, kept as a single broadcastable row."""
        return ad.relu(ad.linear(z, self.store[f"{net}/embed_{site}/weight"],
                                 self.store[f"{net}/embed_{site}/bias"]))

    def shape_features(self, net: str, gx: Tensor, z_s: Tensor):
        """Fused trunk -> (bottleneck features, density); gx = encoded x."""
        h_inst = self._mlp(net, "inst", [gx, self._embed(net, "inst", z_s)])
        if self.config.use_shared_branch:
            h = ad.add(self._mlp(net, "share", [gx]), h_inst)
        else:
            h = h_inst
        # Skip connection: encoded points and embedded shape code re-enter here.
        fused = self._mlp(net, "fuse", [h, gx, self._embed(net, "fuse", z_s)])
        sigma = ad.softplus(ad.linear(fused, self.store[f"{net}/dens/weight"],
                                      self.store[f"{net}/dens/bias"]))
        bneck = ad.linear(fused, self.store[f"{net}/bneck/weight"],
                          self.store[f"{net}/bneck/bias"])
        return bneck, sigma

    def radiance_head(self, net: str, bneck: Tensor, z_c: Tensor, gd: Tensor) -> Tensor:
        """Radiance from bottleneck features + color code + encoded direction."""
        h = ad.relu(ad.linear_parts([bneck, self._embed(net, "rad", z_c), gd],
                                    self.store[f"{net}/rad/layer0/weight"],
                                    self.store[f"{net}/rad/layer0/bias"]))
        return ad.sigmoid(ad.linear(h, self.store[f"{net}/rad/layer1/weight"],
                                    self.store[f"{net}/rad/layer1/bias"]))

    def forward(self, net: str, x: np.ndarray, d: np.ndarray,
                z_s: Tensor, z_c: Tensor, gd: np.ndarray | None = None):
        """Evaluate the field at points x with directions d.

        Returns (radiance (N, 3) in [0,1], density (N, 1) >= 0) as graph
        tensors. x and d are plain arrays (no gradients flow into sample
        positions); callers that already hold encoded directions can pass
        ``gd`` to skip re-encoding per sample.
        """
        if net not in NETS:
            raise ValueError(f"net must be one of {NETS}, got {net!r}")
        gx = ad.constant(encode_position(x, self.config.pos_frequencies))
        if gd is None:
            gd = encode_position(d, self.config.dir_frequencies)
        bneck, sigma = self.shape_features(net, gx, z_s)
        color = self.radiance_head(net, bneck, z_c, ad.constant(gd))
        self._check_outputs(color.data, sigma.data, x)
        return color, sigma

    def forward_instance(self, net: str, x: np.ndarray, d: np.ndarray, k: int):
        return self.forward(net, x, d, self.shape_code(k), self.color_code(k))

    def bottleneck_features(self, net: str, x: np.ndarray, z_s: Tensor):
        """Expose the cached quantity: (bottleneck (N, 8), density (N, 1)).

        Composing with ``radiance_head`` reproduces ``forward`` exactly; the
        same code path computes both.
        """
        gx = ad.constant(encode_position(x, self.config.pos_frequencies))
        return self.shape_features(net, gx, z_s)

    @staticmethod
    def _check_outputs(color: np.ndarray, sigma: np.ndarray, x: np.ndarray) -> None:
        if np.isfinite(color).all() and np.isfinite(sigma).all():
            return
        bad = np.where(~(np.isfinite(color).all(axis=1) & np.isfinite(sigma).all(axis=1)))[0]
        i = int(bad[0])
        raise NonFiniteError(
            f"field produced non-finite output at sample {i}, x={x[i].tolist()}"
        )

    # --- persistence ----------------------------------------------------------

    def clone(self) -> "FieldParameters":
        dup = FieldParameters(FieldConfig(**asdict(self.config)), _empty=True)
        for p in self.store:
            dup.store.add(Parameter(p.name, p.data.copy(), trainable=p.trainable))
        dup.shape_version = self.shape_version
        dup.color_version = self.color_version
        return dup

    def to_records(self):
        for p in self.store:
            yield p.name, p.data

    def save(self, path, extra_config: dict | None = None) -> None:
        config = {"field": asdict(self.config)}
        if extra_config:
            config.update(extra_config)
        save_records(path, config, self.to_records())

    @classmethod
    def load(cls, path) -> tuple["FieldParameters", dict]:
        config, records = load_records(path)
        if "field" not in config:
            raise CheckpointError(f"{path}: header lacks a field config")
        params = cls(FieldConfig.from_dict(config["field"]), _empty=True)
        for name, value in records.items():
            if name.startswith("adam/"):
                continue  # optimizer state rides in trainer checkpoints
            params.store.add(Parameter(name, value))
        expected = FieldParameters(params.config, rng=np.random.default_rng(0))
        missing = set(expected.store.names()) - set(params.store.names())
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:4]}...")
        return params, config
