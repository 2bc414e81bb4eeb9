"""Parametric shape families with known generative factors.

The three families (table, chair, plane) are unions of boxes and cylinders
whose proportions are driven by named scalar factors, so that attribute
discovery downstream can be verified against ground truth. Shapes live in a
family-fixed frame (one normalization per family, computed over the factor
ranges), which keeps factor effects metrically comparable across instances:
doubling leg_length exactly doubles the sampled leg extent.

Also provides silhouette rendering (orthographic point splatting), partial
cloud construction, and dataset persistence (binary clouds + PNG images +
JSON manifest). Each sample is generated from its own derived seed, so
generation is order-independent and parallelizable; the manifest is written
once at the end.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .geometry import PointCloud, load_cloud, save_cloud

FAMILY_FACTORS = {
    "table": {
        "leg_length": (0.3, 1.0),
        "leg_bend": (-0.4, 0.4),
        "top_width": (0.4, 1.2),
        "top_depth": (0.4, 1.2),
    },
    "chair": {
        "leg_length": (0.3, 1.0),
        "leg_bend": (-0.4, 0.4),
        "top_width": (0.4, 1.2),
        "back_height": (0.3, 0.9),
    },
    "plane": {
        "leg_length": (0.3, 1.0),
        "leg_bend": (-0.4, 0.4),
        "top_width": (0.4, 1.2),
        "body_length": (0.6, 1.2),
    },
}

FAMILIES = tuple(FAMILY_FACTORS)

_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


@dataclass
class AttributeSpec:
    """One shape: a family plus its named generative factors."""

    family: str
    factors: dict

    def __post_init__(self) -> None:
        if self.family not in FAMILY_FACTORS:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        declared = FAMILY_FACTORS[self.family]
        if set(self.factors) != set(declared):
            raise ValueError(
                f"{self.family} requires factors {sorted(declared)}, got {sorted(self.factors)}"
            )
        for name, value in self.factors.items():
            lo, hi = declared[name]
            if not (lo <= value <= hi):
                raise ValueError(f"factor {name}={value} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"family": self.family, "factors": dict(self.factors)}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSpec":
        return cls(family=d["family"], factors=dict(d["factors"]))


def random_spec(family: str, rng: np.random.Generator) -> AttributeSpec:
    ranges = FAMILY_FACTORS[family]
    factors = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in sorted(ranges.items())}
    return AttributeSpec(family, factors)


# ---------------------------------------------------------------------------
# primitives


class _Box:
    """Axis-aligned box surface, optionally sheared along x as a linear
    function of height (shear_rate * (shear_ref - y))."""

    def __init__(self, center, size, role, shear_rate=0.0, shear_ref=0.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.size = np.asarray(size, dtype=np.float64)
        self.role = role
        self.shear_rate = shear_rate
        self.shear_ref = shear_ref

    def area(self) -> float:
        sx, sy, sz = self.size
        return 2.0 * (sx * sy + sy * sz + sx * sz)

    def _shear(self, pts: np.ndarray) -> np.ndarray:
        if self.shear_rate:
            pts = pts.copy()
            pts[:, 0] += self.shear_rate * (self.shear_ref - pts[:, 1])
        return pts

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        sx, sy, sz = self.size
        face_areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        faces = rng.choice(6, size=count, p=face_areas / face_areas.sum())
        u = rng.uniform(-0.5, 0.5, size=count)
        v = rng.uniform(-0.5, 0.5, size=count)
        pts = np.empty((count, 3))
        for f in range(6):
            m = faces == f
            axis, sign = divmod(f, 2)
            fixed = (0.5 if sign == 0 else -0.5) * self.size[axis]
            others = [a for a in range(3) if a != axis]
            pts[m, axis] = fixed
            pts[m, others[0]] = u[m] * self.size[others[0]]
            pts[m, others[1]] = v[m] * self.size[others[1]]
        return self._shear(pts + self.center)

    def bbox(self) -> np.ndarray:
        half = self.size / 2.0
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        corners = corners * half + self.center
        corners = self._shear(corners)
        return np.stack([corners.min(axis=0), corners.max(axis=0)])


class _Cylinder:
    """Cylinder surface (lateral + caps) with its axis along x or y."""

    def __init__(self, center, radius, height, role, axis="y"):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.height = float(height)
        self.role = role
        self.axis = {"x": 0, "y": 1}[axis]

    def area(self) -> float:
        return 2 * math.pi * self.radius * self.height + 2 * math.pi * self.radius**2

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        lateral = 2 * math.pi * self.radius * self.height
        p_lateral = lateral / self.area()
        on_side = rng.random(count) < p_lateral
        theta = rng.uniform(0.0, 2 * math.pi, size=count)
        pts = np.empty((count, 3))

        axis = self.axis
        others = [a for a in range(3) if a != axis]
        h = rng.uniform(-0.5, 0.5, size=count) * self.height
        pts[on_side, axis] = h[on_side]
        pts[on_side, others[0]] = self.radius * np.cos(theta[on_side])
        pts[on_side, others[1]] = self.radius * np.sin(theta[on_side])

        caps = ~on_side
        r = self.radius * np.sqrt(rng.random(count))
        side = np.where(rng.random(count) < 0.5, 0.5, -0.5) * self.height
        pts[caps, axis] = side[caps]
        pts[caps, others[0]] = r[caps] * np.cos(theta[caps])
        pts[caps, others[1]] = r[caps] * np.sin(theta[caps])
        return pts + self.center

    def bbox(self) -> np.ndarray:
        half = np.full(3, self.radius)
        half[self.axis] = self.height / 2.0
        return np.stack([self.center - half, self.center + half])


# ---------------------------------------------------------------------------
# families


def _leg_positions(width, depth):
    x = max(width / 2.0 - 0.05, 0.04)
    z = max(depth / 2.0 - 0.05, 0.04)
    return [(sx * x, sz * z) for sx in (-1, 1) for sz in (-1, 1)]


def _table_parts(f):
    length, bend = f["leg_length"], f["leg_bend"]
    width, depth = f["top_width"], f["top_depth"]
    parts = [
        _Box((x, length / 2.0, z), (0.06, length, 0.06), "leg", shear_rate=bend, shear_ref=length)
        for x, z in _leg_positions(width, depth)
    ]
    parts.append(_Box((0.0, length + 0.035, 0.0), (width, 0.07, depth), "top"))
    return parts


def _chair_parts(f):
    length, bend = f["leg_length"], f["leg_bend"]
    width, back = f["top_width"], f["back_height"]
    depth = 0.62
    parts = [
        _Box((x, length / 2.0, z), (0.06, length, 0.06), "leg", shear_rate=bend, shear_ref=length)
        for x, z in _leg_positions(width, depth)
    ]
    parts.append(_Box((0.0, length + 0.035, 0.0), (width, 0.07, depth), "seat"))
    parts.append(
        _Box((0.0, length + 0.07 + back / 2.0, -depth / 2.0 + 0.025), (width, back, 0.05), "back")
    )
    return parts


def _plane_parts(f):
    length, bend = f["leg_length"], f["leg_bend"]
    span, body = f["top_width"], f["body_length"]
    strut = 0.32 * length
    parts = [
        _Cylinder((0.0, 0.0, 0.0), 0.09, body, "body", axis="x"),
        _Box((0.05, 0.02, 0.0), (0.28, 0.045, 1.25 * span), "wing"),
        _Box((-body / 2.0 + 0.06, 0.17, 0.0), (0.12, 0.22, 0.03), "fin"),
        _Box((-body / 2.0 + 0.06, 0.08, 0.0), (0.12, 0.03, 0.4), "tail"),
    ]
    for zx in (-0.18, 0.18):
        parts.append(
            _Box(
                (zx, -0.09 - strut / 2.0, 0.0),
                (0.035, strut, 0.035),
                "leg",
                shear_rate=bend,
                shear_ref=-0.09,
            )
        )
    return parts


_BUILDERS = {"table": _table_parts, "chair": _chair_parts, "plane": _plane_parts}

_FRAME_CACHE: dict = {}


def _family_frame(family: str):
    """Fixed (center, scale) mapping the family's whole factor range into the
    unit cube; computed from the union bbox over all factor-range corners."""
    if family in _FRAME_CACHE:
        return _FRAME_CACHE[family]
    ranges = FAMILY_FACTORS[family]
    names = sorted(ranges)
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for mask in range(2 ** len(names)):
        factors = {
            name: ranges[name][(mask >> i) & 1] for i, name in enumerate(names)
        }
        for part in _BUILDERS[family](factors):
            b = part.bbox()
            lo = np.minimum(lo, b[0])
            hi = np.maximum(hi, b[1])
    center = (lo + hi) / 2.0
    scale = 1.0 / float((hi - lo).max())
    _FRAME_CACHE[family] = (center, scale)
    return center, scale


def generate_shape_labeled(spec: AttributeSpec, n_points: int, seed: int):
    """Sample the shape surface; returns (PointCloud, per-point role labels)."""
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    parts = _BUILDERS[spec.family](spec.factors)
    areas = np.array([p.area() for p in parts])
    # largest-remainder apportionment keeps counts deterministic and exact
    quota = areas / areas.sum() * n_points
    counts = np.floor(quota).astype(int)
    remainder = n_points - counts.sum()
    if remainder > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:remainder]] += 1

    rng = np.random.default_rng(seed)
    center, scale = _family_frame(spec.family)
    chunks, labels = [], []
    for part, count in zip(parts, counts):
        if count == 0:
            continue
        chunks.append(part.sample(rng, count))
        labels.extend([part.role] * count)
    pts = (np.concatenate(chunks) - center) * scale
    return PointCloud(pts.astype(np.float32)), labels


def generate_shape(spec: AttributeSpec, n_points: int, seed: int) -> PointCloud:
    """Uniform surface sampling over the family's primitives, in the
    family-fixed unit-cube frame. Deterministic for (spec, n_points, seed)."""
    cloud, _ = generate_shape_labeled(spec, n_points, seed)
    return cloud


# ---------------------------------------------------------------------------
# rendering


def view_basis(azimuth_deg: float, elevation_deg: float):
    """Orthographic camera basis (view direction, image right, image up)."""
    az = math.radians(azimuth_deg % 360.0)
    el = math.radians(elevation_deg % 360.0)
    direction = np.array(
        [math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)]
    )
    right = np.array([-math.sin(az), 0.0, math.cos(az)])
    up = np.cross(right, direction)
    return direction, right, up


_HALF_WINDOW = 0.9  # covers any rotation of the unit cube (max radius ~0.87)


def render_silhouette(cloud: PointCloud, view, resolution: int = 128) -> np.ndarray:
    """Orthographic silhouette: each point splats an antialiased disc.

    ``view`` is (azimuth_deg, elevation_deg). Returns a uint8 (res, res)
    image, row 0 at the top. Deterministic and point-order independent
    (max-accumulation).
    """
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    _, right, up = view_basis(*view)
    pts = np.asarray(cloud.points, dtype=np.float64)
    u = pts @ right
    v = pts @ up
    scale = resolution / (2.0 * _HALF_WINDOW)
    px = (u + _HALF_WINDOW) * scale
    py = (_HALF_WINDOW - v) * scale

    radius = max(1.5, resolution / 128.0 * 1.5)
    image = np.zeros((resolution, resolution), dtype=np.float64)
    reach = int(math.ceil(radius))
    base_x = np.floor(px).astype(np.int64)
    base_y = np.floor(py).astype(np.int64)
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            ix = base_x + dx
            iy = base_y + dy
            d = np.hypot(ix + 0.5 - px, iy + 0.5 - py)
            w = np.clip(radius + 0.5 - d, 0.0, 1.0)
            ok = (w > 0) & (ix >= 0) & (ix < resolution) & (iy >= 0) & (iy < resolution)
            np.maximum.at(image, (iy[ok], ix[ok]), w[ok])
    return (image * 255.0).round().astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    PILImage.fromarray(image, mode="L").save(path)


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# partial clouds


def make_partial(cloud: PointCloud, view_direction, keep_fraction: float) -> PointCloud:
    """Depth-ordered crop: keep the fraction of points nearest the camera
    half-space, simulating self-occlusion."""
    if not (0.0 < keep_fraction < 1.0):
        raise ValueError("keep_fraction must be in (0, 1)")
    direction = np.asarray(view_direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        raise ValueError("view direction must be non-zero")
    direction = direction / norm
    keep = int(round(cloud.n * keep_fraction))
    if keep < 1:
        raise ValueError(f"keep_fraction {keep_fraction} keeps no points of {cloud.n}")
    depth = cloud.points.astype(np.float64) @ direction
    order = np.argsort(-depth, kind="stable")[:keep]
    return PointCloud(cloud.points[np.sort(order)])


# ---------------------------------------------------------------------------
# datasets


@dataclass
class GenerationConfig:
    out_dir: str
    train: int = 512
    val: int = 64
    test: int = 128
    seed: int = 0
    resolution: int = 128
    dense_points: int = 4096
    families: tuple = FAMILIES
    view: tuple = (30.0, 20.0)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["families"] = list(self.families)
        d["view"] = list(self.view)
        return d


@dataclass
class DatasetManifest:
    root: Path
    splits: dict
    config: dict

    def records(self, split: str):
        return self.splits[split]

    def path(self, record: dict, kind: str) -> Path:
        return Path(self.root) / record[kind]

    def save(self) -> None:
        payload = {"config": self.config, "splits": self.splits}
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))

    def verify(self) -> None:
        ids = set()
        for split, records in self.splits.items():
            for rec in records:
                if rec["id"] in ids:
                    raise ValueError(f"duplicate sample id {rec['id']} in split {split}")
                ids.add(rec["id"])
                for kind in ("cloud", "image"):
                    p = self.path(rec, kind)
                    if not p.exists():
                        raise FileNotFoundError(f"manifest references missing file {p}")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    payload = json.loads((root / "manifest.json").read_text())
    return DatasetManifest(root=root, splits=payload["splits"], config=payload["config"])


def _sample_seed(master: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(master), _SPLIT_CODES[split], int(index)])
    return int(ss.generate_state(1)[0])


def build_dataset(config: GenerationConfig) -> DatasetManifest:
    """Generate shapes + silhouettes and write them under config.out_dir.

    Every sample is derived from its own seed (a function of the master seed,
    split, and index), so rebuilding with the same config is bit-identical
    and samples could be generated concurrently.
    """
    root = Path(config.out_dir)
    (root / "shapes").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)

    splits: dict = {}
    for split, count in (("train", config.train), ("val", config.val), ("test", config.test)):
        records = []
        for i in range(count):
            seed = _sample_seed(config.seed, split, i)
            rng = np.random.default_rng(seed)
            family = config.families[int(rng.integers(len(config.families)))]
            spec = random_spec(family, rng)
            cloud = generate_shape(spec, config.dense_points, seed)
            image = render_silhouette(cloud, config.view, config.resolution)

            sample_id = f"{split}_{i:05d}"
            cloud_rel = f"shapes/{sample_id}.apc"
            image_rel = f"images/{sample_id}.png"
            save_cloud(root / cloud_rel, cloud)
            save_image(root / image_rel, image)
            records.append(
                {
                    "id": sample_id,
                    "family": family,
                    "factors": spec.factors,
                    "seed": seed,
                    "cloud": cloud_rel,
                    "image": image_rel,
                    "view": list(config.view),
                }
            )
        splits[split] = records

    manifest = DatasetManifest(root=root, splits=splits, config=config.to_dict())
    manifest.save()
    return manifest


def import_mesh_dataset(root) -> DatasetManifest:
    """Adapter stub for external mesh benchmarks (e.g. ShapeNet-style data).

    Expected layout: <root>/<category>/<model_id>/ containing a sampled
    surface cloud ``points.apc`` (or ``points.xyz``) plus one or more
    rendered views ``view_*.png``, and a top-level ``manifest.json`` in this
    module's schema. Full-benchmark processing is out of scope here.
    """
    raise NotImplementedError("external mesh benchmark import is not implemented at desk scale")
