"""Synthetic multi-instance datasets with an exact analytic oracle.

Instances are chair-like assemblies of axis-aligned colored boxes inside
the unit scene bound; cameras sit on a ring of radius 4 looking at the
origin (near 2, far 6), so sampling ranges never need per-dataset tuning.
The oracle renders nearest ray-box hits with flat colors on a white
background and doubles as the ground-truth generator for edit metrics
(per-pixel part indices come along for free).

Generated datasets always contain a recolored twin of instance 0 (as an
un-trained reference) and, when there is room, a same-palette pair of
instances with different geometry; both support edit-propagation and
disentanglement experiments.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .render import Camera, generate_rays, look_at_pose

PART_LABELS = ("seat", "back", "leg", "arm", "body", "wheel")

SCENE_RADIUS = 4.0
SCENE_NEAR = 2.0
SCENE_FAR = 6.0

PALETTE_POOL = {
    "red": (0.85, 0.12, 0.10),
    "blue": (0.15, 0.25, 0.85),
    "green": (0.12, 0.65, 0.20),
    "orange": (0.90, 0.55, 0.10),
    "purple": (0.55, 0.20, 0.70),
    "teal": (0.10, 0.60, 0.65),
    "yellow": (0.90, 0.85, 0.15),
    "brown": (0.45, 0.30, 0.15),
    "gray": (0.35, 0.35, 0.38),
}

_LIGHT = np.array([0.4, 1.0, 0.55]) / np.linalg.norm([0.4, 1.0, 0.55])


class DatasetError(Exception):
    pass


@dataclass
class Part:
    lo: np.ndarray
    hi: np.ndarray
    color: tuple
    label: str

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if (self.hi <= self.lo).any():
            raise ValueError(f"degenerate box {self.lo} .. {self.hi}")
        if (self.lo < -1).any() or (self.hi > 1).any():
            raise ValueError("part outside the unit scene bound")
        if self.label not in PART_LABELS:
            raise ValueError(f"unknown part label {self.label!r}")

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "color": list(self.color), "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lo"], d["hi"], tuple(d["color"]), d["label"])


@dataclass
class BlockInstance:
    instance_id: str
    parts: list

    def to_dict(self):
        return {"id": self.instance_id, "parts": [p.to_dict() for p in self.parts]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], [Part.from_dict(p) for p in d["parts"]])

    def part_indices(self, label: str):
        return [i for i, p in enumerate(self.parts) if p.label == label]


@dataclass
class OracleView:
    rgb: np.ndarray    # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W), far where no hit
    part: np.ndarray   # (H, W) int, -1 = background


def oracle_render(instance: BlockInstance, camera: Camera, shaded: bool = False) -> OracleView:
    """Exact nearest-hit rendering via the slab method."""
    origins, dirs, _ = generate_rays(camera)
    o = origins.astype(np.float64)
    d = dirs.astype(np.float64)
    n = o.shape[0]
    best_t = np.full(n, np.inf)
    best_part = np.full(n, -1, dtype=np.int32)
    best_axis = np.zeros(n, dtype=np.int64)
    zero = np.abs(d) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    for pi, part in enumerate(instance.parts):
        lo_t = (np.where(inv >= 0, part.lo, part.hi) - o) * inv
        hi_t = (np.where(inv >= 0, part.hi, part.lo) - o) * inv
        inside = (o >= part.lo) & (o <= part.hi)
        lo_t = np.where(zero, np.where(inside, -np.inf, np.inf), lo_t)
        hi_t = np.where(zero, np.where(inside, np.inf, -np.inf), hi_t)
        axis = np.argmax(lo_t, axis=1)
        t_near = lo_t.max(axis=1)
        t_far = hi_t.min(axis=1)
        hit = (t_far >= t_near) & (t_far > 0) & (t_near < camera.far) & (t_near < best_t)
        best_t[hit] = t_near[hit]
        best_part[hit] = pi
        best_axis[hit] = axis[hit]

    rgb = np.ones((n, 3), dtype=np.float32)
    hit_mask = best_part >= 0
    if hit_mask.any():
        colors = np.array([p.color for p in instance.parts], dtype=np.float32)
        rgb[hit_mask] = colors[best_part[hit_mask]]
        if shaded:
            sign = -np.sign(np.take_along_axis(d, best_axis[:, None], axis=1))[:, 0]
            normal = np.zeros((n, 3))
            normal[np.arange(n), best_axis] = sign
            lambert = 0.55 + 0.45 * np.clip((normal * _LIGHT).sum(axis=1), 0.0, 1.0)
            rgb[hit_mask] *= lambert[hit_mask, None].astype(np.float32)
    depth = np.where(hit_mask, best_t, camera.far)
    h, w = camera.height, camera.width
    return OracleView(rgb.reshape(h, w, 3), depth.reshape(h, w).astype(np.float32),
                      best_part.reshape(h, w))


def oracle_part_mask(instance: BlockInstance, camera: Camera, part_index: int,
                     exclusive: bool = False) -> np.ndarray:
    """Pixels whose primary hit is the given part.

    ``exclusive=True`` further requires that the ray hits nothing else, so
    removing the part reveals pure background at those pixels.
    """
    view = oracle_render(instance, camera)
    mask = view.part == part_index
    if not exclusive:
        return mask
    others = BlockInstance(instance.instance_id,
                           [p for i, p in enumerate(instance.parts) if i != part_index])
    if others.parts:
        behind = oracle_render(others, camera)
        mask &= behind.part == -1
    return mask


# --- procedural chairs ------------------------------------------------------


def _chair(geometry: dict, palette: dict) -> list:
    """Boxes for one chair from a geometry/palette description."""
    wx, wz = geometry["seat_half_width"], geometry["seat_half_depth"]
    seat_top = geometry["seat_top"]
    seat_thick = geometry["seat_thickness"]
    leg_t = geometry["leg_thickness"]
    parts = [Part([-wx, seat_top - seat_thick, -wz], [wx, seat_top, wz],
                  palette["seat"], "seat")]
    back_top = min(seat_top + geometry["back_height"], 1.0)
    back_thick = geometry.get("back_thickness", 0.15)
    parts.append(Part([-wx, seat_top, -wz], [wx, back_top, -wz + back_thick],
                      palette["back"], "back"))
    half = leg_t / 2.0
    for cx, cz in geometry["leg_positions"]:
        parts.append(Part([cx - half, -0.9, cz - half], [cx + half, seat_top - seat_thick, cz + half],
                          palette["leg"], "leg"))
    if geometry.get("arms"):
        arm_h = geometry.get("arm_height", 0.3)
        for side in (-1, 1):
            x0 = side * wx
            lo_x, hi_x = sorted((x0, x0 + side * 0.13))
            parts.append(Part([lo_x, seat_top, -wz + 0.15], [hi_x, seat_top + arm_h, wz - 0.05],
                              palette["arm"], "arm"))
    return parts


def _leg_corners(wx, wz, inset):
    return [(sx * (wx - inset), sz * (wz - inset)) for sx in (-1, 1) for sz in (-1, 1)]


def _base_geometry() -> dict:
    # Chunky proportions keep the edge-pixel fraction low at 64x64.
    wx, wz = 0.6, 0.52
    return {
        "seat_half_width": wx,
        "seat_half_depth": wz,
        "seat_top": 0.1,
        "seat_thickness": 0.18,
        "back_height": 0.8,
        "back_thickness": 0.18,
        "leg_thickness": 0.3,
        "leg_positions": _leg_corners(wx, wz, 0.17),
        "arms": False,
    }


def _sample_geometry(rng: np.random.Generator) -> dict:
    wx = rng.uniform(0.5, 0.65)
    wz = rng.uniform(0.44, 0.58)
    geo = {
        "seat_half_width": wx,
        "seat_half_depth": wz,
        "seat_top": rng.uniform(0.02, 0.14),
        "seat_thickness": rng.uniform(0.14, 0.2),
        "back_height": rng.uniform(0.6, 0.88),
        "back_thickness": rng.uniform(0.14, 0.2),
        "leg_thickness": rng.uniform(0.24, 0.34),
        "leg_positions": _leg_corners(wx, wz, 0.17),
        "arms": bool(rng.random() < 0.4),
    }
    if rng.random() < 0.2:
        geo["leg_positions"] = geo["leg_positions"][:3]
    return geo


def _sample_palette(rng: np.random.Generator) -> dict:
    names = rng.choice(list(PALETTE_POOL), size=4, replace=False)
    return {"seat": PALETTE_POOL[names[0]], "back": PALETTE_POOL[names[1]],
            "leg": PALETTE_POOL[names[2]], "arm": PALETTE_POOL[names[3]]}


_SOURCE_PALETTE = {"seat": PALETTE_POOL["blue"], "back": PALETTE_POOL["orange"],
                   "leg": PALETTE_POOL["gray"], "arm": PALETTE_POOL["teal"]}
_RECOLOR_TARGET = PALETTE_POOL["red"]
_SHARED_PALETTE = {"seat": PALETTE_POOL["green"], "back": PALETTE_POOL["purple"],
                   "leg": PALETTE_POOL["brown"], "arm": PALETTE_POOL["yellow"]}


def camera_ring(view_count: int, resolution: int, radius: float = SCENE_RADIUS,
                near: float = SCENE_NEAR, far: float = SCENE_FAR) -> list:
    """Evenly spaced azimuths with alternating elevation, looking at origin."""
    cameras = []
    for i in range(view_count):
        azimuth = 2.0 * np.pi * i / view_count
        elevation = np.deg2rad(18.0 if i % 2 == 0 else 30.0)
        position = radius * np.array([
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
            np.cos(elevation) * np.cos(azimuth),
        ])
        cameras.append(Camera(look_at_pose(position), focal=float(resolution),
                              width=resolution, height=resolution, near=near, far=far))
    return cameras


@dataclass
class SceneDataset:
    manifest: dict
    instances: list                      # BlockInstance, training instances
    references: dict                     # name -> BlockInstance, never trained
    cameras: list                        # Camera per view id (shared rig)
    images: dict = field(default_factory=dict)      # (instance idx, view) -> uint8
    ref_images: dict = field(default_factory=dict)  # (name, view) -> uint8

    @property
    def instance_count(self) -> int:
        return len(self.instances)

    @property
    def resolution(self) -> int:
        return self.manifest["resolution"]

    @property
    def near(self) -> float:
        return self.manifest["near"]

    @property
    def far(self) -> float:
        return self.manifest["far"]

    def train_view_ids(self):
        return list(self.manifest["train_views"])

    def heldout_view_ids(self):
        return list(self.manifest["heldout_views"])

    def camera(self, view_id: int) -> Camera:
        return self.cameras[view_id]

    def image(self, k: int, view_id: int) -> np.ndarray:
        return self.images[(k, view_id)].astype(np.float32) / 255.0

    def reference_image(self, name: str, view_id: int) -> np.ndarray:
        return self.ref_images[(name, view_id)].astype(np.float32) / 255.0

    def fingerprint(self) -> str:
        import hashlib
        blob = json.dumps(self.manifest, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def generate_dataset(seed: int, instance_count: int, views_per_instance: int,
                     resolution: int, variation: str = "both",
                     heldout_views: int = 0, shaded: bool = False,
                     geometry_pool: int | None = None) -> SceneDataset:
    """Procedurally build instances, render oracle images, assemble splits.

    ``variation``: 'color' fixes geometry across instances, 'shape' fixes
    the palette, 'both' varies both. Instance 0 always gets a recolored
    twin stored as the reference 'recolor_0'; with >= 4 instances under
    shape or both variation, instances 2 and 3 share a palette.

    ``geometry_pool`` (variation='both' only) draws geometries from a pool
    of that many shapes assigned round-robin, so every shape recurs under
    several palettes; stress-tests shape/color disentanglement.
    """
    if instance_count < 1 or views_per_instance < 1:
        raise ValueError("instance_count and views_per_instance must be >= 1")
    if variation not in ("color", "shape", "both"):
        raise ValueError(f"unknown variation {variation!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    total_views = views_per_instance + heldout_views

    geometries, palettes = [], []
    for k in range(instance_count):
        if k == 0:
            geo = _base_geometry()
            pal = dict(_SOURCE_PALETTE)
        else:
            geo = _sample_geometry(rng) if variation in ("shape", "both") else _base_geometry()
            pal = _sample_palette(rng) if variation in ("color", "both") else dict(_SOURCE_PALETTE)
        if variation in ("shape", "both") and k in (2, 3) and instance_count >= 4:
            pal = dict(_SHARED_PALETTE)
        if variation == "both" and geometry_pool and k >= geometry_pool:
            # Round-robin geometry reuse under fresh palettes.
            geo = dict(geometries[k % geometry_pool])
            while pal == palettes[k % geometry_pool]:
                pal = _sample_palette(rng)
        elif variation == "both" and not geometry_pool and k in (4, 5) and instance_count > k:
            # Cross-palette geometry twins of instances 0/1: shared geometry
            # under different colors is the structure code splitting exploits.
            geo = dict(geometries[k - 4])
            while pal == palettes[k - 4]:
                pal = _sample_palette(rng)
        if k == 1:
            # Removal target: four sturdy legs, no arms.
            geo["leg_positions"] = geo["leg_positions"][:4] if len(geo["leg_positions"]) >= 4 \
                else _leg_corners(geo["seat_half_width"], geo["seat_half_depth"], 0.13)
            geo["leg_thickness"] = max(geo["leg_thickness"], 0.22)
            geo["arms"] = False
        geometries.append(geo)
        palettes.append(pal)

    instances = [BlockInstance(f"{k:04d}", _chair(geometries[k], palettes[k]))
                 for k in range(instance_count)]

    twin_palette = dict(palettes[0])
    twin_palette["seat"] = _RECOLOR_TARGET
    references = {"recolor_0": BlockInstance("recolor_0", _chair(geometries[0], twin_palette))}

    cameras = camera_ring(total_views, resolution)
    if heldout_views:
        heldout = sorted({int(round((i + 0.5) * total_views / heldout_views)) % total_views
                          for i in range(heldout_views)})
    else:
        heldout = []
    train = [v for v in range(total_views) if v not in heldout]

    recolored_part = instances[0].part_indices("seat")[0]
    manifest = {
        "format": "cnerf-dataset-v1",
        "seed": seed,
        "variation": variation,
        "resolution": resolution,
        "shaded": shaded,
        "near": SCENE_NEAR,
        "far": SCENE_FAR,
        "radius": SCENE_RADIUS,
        "train_views": train,
        "heldout_views": heldout,
        "instances": [inst.to_dict() for inst in instances],
        "references": {name: inst.to_dict() for name, inst in references.items()},
        "pairs": {
            "color_pair": [0, "recolor_0"],
            "recolored_part": recolored_part,
            "same_palette": [2, 3] if instance_count >= 4 and variation != "color" else None,
            "geometry_pairs": _geometry_pairs(variation, instance_count, geometry_pool),
        },
        "geometry_pool": geometry_pool,
    }

    ds = SceneDataset(manifest=manifest, instances=instances, references=references,
                      cameras=cameras)
    for k, inst in enumerate(instances):
        for v in range(total_views):
            view = oracle_render(inst, cameras[v], shaded=shaded)
            ds.images[(k, v)] = _quantize(view.rgb)
    for name, inst in references.items():
        for v in range(total_views):
            view = oracle_render(inst, cameras[v], shaded=shaded)
            ds.ref_images[(name, v)] = _quantize(view.rgb)
    return ds


def _geometry_pairs(variation: str, instance_count: int, geometry_pool) -> list:
    if variation != "both":
        return []
    if geometry_pool:
        return [[k % geometry_pool, k] for k in range(geometry_pool, instance_count)]
    return [[0, 4], [1, 5]] if instance_count >= 6 else []


def _quantize(rgb: np.ndarray) -> np.ndarray:
    return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_dataset(ds: SceneDataset, path) -> None:
    """Write manifest + per-instance images/cameras/parts; deterministic."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(ds.manifest, f, indent=2, sort_keys=True)
    total_views = len(ds.cameras)

    def write_views(dirname, images_for):
        os.makedirs(dirname, exist_ok=True)
        for v in range(total_views):
            Image.fromarray(images_for(v)).save(os.path.join(dirname, f"view_{v:03d}.png"))
            ds.cameras[v].save(os.path.join(dirname, f"cam_{v:03d}.json"))

    for k, inst in enumerate(ds.instances):
        inst_dir = os.path.join(path, "instances", f"{k:04d}")
        write_views(inst_dir, lambda v, k=k: ds.images[(k, v)])
        with open(os.path.join(inst_dir, "parts.json"), "w") as f:
            json.dump(inst.to_dict(), f, indent=2, sort_keys=True)
    for name, inst in ds.references.items():
        ref_dir = os.path.join(path, "references", name)
        write_views(ref_dir, lambda v, name=name: ds.ref_images[(name, v)])
        with open(os.path.join(ref_dir, "parts.json"), "w") as f:
            json.dump(inst.to_dict(), f, indent=2, sort_keys=True)


def load_dataset(path) -> SceneDataset:
    """Load a dataset directory; missing files are reported by name."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    instances = [BlockInstance.from_dict(d) for d in manifest["instances"]]
    references = {name: BlockInstance.from_dict(d)
                  for name, d in manifest.get("references", {}).items()}
    total_views = len(manifest["train_views"]) + len(manifest["heldout_views"])

    missing = []

    def read_views(dirname, sink, key):
        cams = []
        for v in range(total_views):
            img_path = os.path.join(dirname, f"view_{v:03d}.png")
            cam_path = os.path.join(dirname, f"cam_{v:03d}.json")
            for p in (img_path, cam_path):
                if not os.path.exists(p):
                    missing.append(p)
            if missing:
                continue
            with Image.open(img_path) as im:
                sink[(key, v)] = np.asarray(im.convert("RGB"))
            cams.append(Camera.load(cam_path))
        return cams

    ds = SceneDataset(manifest=manifest, instances=instances, references=references,
                      cameras=[])
    for k in range(len(instances)):
        cams = read_views(os.path.join(path, "instances", f"{k:04d}"), ds.images, k)
        if k == 0 and cams:
            ds.cameras = cams
    for name in references:
        read_views(os.path.join(path, "references", name), ds.ref_images, name)
    if missing:
        raise DatasetError("dataset incomplete, missing files:\n" + "\n".join(missing))
    return ds
