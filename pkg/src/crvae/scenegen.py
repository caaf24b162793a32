"""Procedural indoor-like scenes, ray-marched depth, sparse sampling, voxelization.

World frame: the reconstruction volume is the cube ``[0, extent]^3`` with
``z`` up; grid index ``(i, j, k)`` maps to ``(x, y, z)``. Camera frame follows
the pinhole convention (x right, y down, z forward), and a pixel ``(u, v)``
back-projects along ``K^-1 (u, v, 1)``, so depth is the camera-frame z.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .voxgeo import VOLUME_EXTENT, read_vxg, write_vxg

log = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 0.0, 1.0])
SPLITS = ("train", "val", "test")


# ------------------------------------------------------------------ scenes

@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        return np.einsum("...i,...i->...", d, d) <= self.radius ** 2


@dataclass(frozen=True)
class Box:
    min_corner: tuple
    extents: tuple

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.min_corner)
        hi = lo + np.asarray(self.extents)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    extent: float = VOLUME_EXTENT
    grid_n: int = 16

    @property
    def voxel_size(self) -> float:
        return self.extent / self.grid_n


def voxel_centers(n: int, extent: float) -> np.ndarray:
    c = (np.arange(n) + 0.5) * (extent / n)
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def generate_scene(spec: SceneSpec) -> np.ndarray:
    """Binary grid: a voxel is occupied iff its center lies inside any primitive."""
    pts = voxel_centers(spec.grid_n, spec.extent)
    occ = np.zeros(pts.shape[:3], dtype=bool)
    for prim in spec.primitives:
        occ |= prim.contains(pts)
    return occ.astype(np.float64)


def sample_scene_spec(rng: np.random.Generator, grid_n: int = 16,
                      extent: float = VOLUME_EXTENT) -> SceneSpec:
    """A floor slab plus a few boxes and spheres resting inside the volume."""
    vs = extent / grid_n
    floor_h = rng.uniform(1.5, 3.0) * vs
    prims = [Box((0.0, 0.0, 0.0), (extent, extent, floor_h))]
    for _ in range(rng.integers(1, 4)):
        size = rng.uniform(0.4, 1.2, size=3) * extent / 3.0
        size = np.maximum(size, 2.0 * vs)
        corner = rng.uniform(0.0, 1.0, size=2) * (extent - size[:2])
        prims.append(Box((float(corner[0]), float(corner[1]), float(floor_h)),
                         tuple(float(s) for s in size)))
    for _ in range(rng.integers(1, 3)):
        r = rng.uniform(0.2, 0.5) * extent / 3.0
        r = max(r, 1.5 * vs)
        c = rng.uniform(r, extent - r, size=3)
        c[2] = max(c[2], floor_h + r * 0.5)
        prims.append(Sphere(tuple(float(x) for x in c), float(r)))
    return SceneSpec(tuple(prims), extent, grid_n)


# ------------------------------------------------------------------ camera

@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 64
    height: int = 64
    position: tuple = (0.0, 0.0, 0.0)
    target: tuple = (1.5, 1.5, 1.5)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation; columns are the right, down and forward axes."""
        fwd = np.asarray(self.target, float) - np.asarray(self.position, float)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, WORLD_UP)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd], axis=1)

    def pixel_rays(self, u, v) -> np.ndarray:
        """World-frame ray directions whose camera-frame z component is 1."""
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        return d @ self.rotation().T


def default_camera(position, target=None, width=64, height=64, half_fov_deg=28.0,
                   extent: float = VOLUME_EXTENT) -> Camera:
    f = 0.5 * width / np.tan(np.radians(half_fov_deg))
    if target is None:
        target = (extent / 2,) * 3
    return Camera(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                  tuple(float(x) for x in position), tuple(float(x) for x in target))


def sample_camera(rng: np.random.Generator, width=64, height=64,
                  extent: float = VOLUME_EXTENT) -> Camera:
    """Camera outside the volume on a raised ring, looking near the center."""
    az = rng.uniform(0.0, 2 * np.pi)
    el = np.radians(rng.uniform(15.0, 40.0))
    dist = rng.uniform(1.1, 1.35) * extent
    center = np.full(3, extent / 2)
    pos = center + dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    target = center + rng.uniform(-0.1, 0.1, size=3) * extent
    return default_camera(pos, target, width, height, extent=extent)


# --------------------------------------------------------------- rendering

@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W), 0 where invalid
    valid: np.ndarray  # (H, W) bool
    missed_volume: bool = False


def _ray_box(origin, dirs, extent):
    """Slab intersection of rays with [0, extent]^3; returns (t_near, t_far)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (0.0 - origin) * inv
        t1 = (extent - origin) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    # rays parallel to a slab and outside it never enter
    para = dirs == 0
    outside = para & ((origin < 0) | (origin > extent))
    tmin = np.where(para, -np.inf, tmin)
    tmax = np.where(para, np.inf, tmax)
    near = np.max(tmin, axis=-1)
    far = np.min(tmax, axis=-1)
    far = np.where(np.any(outside, axis=-1), -np.inf, far)
    return np.maximum(near, 0.0), far


def render_depth(grid: np.ndarray, camera: Camera, extent: float = VOLUME_EXTENT) -> DepthMap:
    """March each pixel ray at quarter-voxel steps; depth is z of the first occupied sample."""
    grid = np.asarray(grid)
    n = grid.shape[0]
    vs = extent / n
    h, w = camera.height, camera.width
    vv, uu = np.mgrid[0:h, 0:w]
    dirs = camera.pixel_rays(uu.ravel(), vv.ravel())
    origin = np.asarray(camera.position, float)
    near, far = _ray_box(origin, dirs, extent)
    enters = far > near
    depth = np.zeros(h * w)
    valid = np.zeros(h * w, dtype=bool)
    if not enters.any():
        log.warning("camera frustum misses the volume")
        return DepthMap(depth.reshape(h, w), valid.reshape(h, w), True)
    occ = grid > 0.5
    idx = np.flatnonzero(enters)
    d = dirs[idx]
    dt = (vs / 4.0) / np.linalg.norm(d, axis=1)
    t = near[idx].copy()
    t_far = far[idx]
    alive = np.ones(idx.size, dtype=bool)
    hit_t = np.full(idx.size, np.nan)
    while alive.any():
        a = np.flatnonzero(alive)
        p = origin + t[a, None] * d[a]
        ijk = np.clip(np.floor(p / vs).astype(int), 0, n - 1)
        hit = occ[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
        hit_t[a[hit]] = t[a[hit]]
        alive[a[hit]] = False
        t[a] += dt[a]
        alive &= t <= t_far
    found = ~np.isnan(hit_t)
    depth[idx[found]] = hit_t[found]
    valid[idx[found]] = True
    return DepthMap(depth.reshape(h, w), valid.reshape(h, w), False)


# ------------------------------------------------------------ observations

@dataclass
class SparseDepthObservation:
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    camera: Camera
    valid_pixels: int
    empty: bool = False

    @property
    def total_pixels(self) -> int:
        return self.camera.width * self.camera.height

    def __len__(self) -> int:
        return int(self.u.size)


def sample_count(rate: float, valid: int) -> int:
    """round(rate * valid), halves rounded up."""
    return int(np.floor(rate * valid + 0.5))


def sparsify(depth_map: DepthMap, camera: Camera, rate: float = 0.05,
             rng: np.random.Generator | None = None) -> SparseDepthObservation:
    """Keep ``round(rate * valid)`` valid pixels, uniformly without replacement."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"sampling rate must be in [0, 1], got {rate}")
    flat = np.flatnonzero(depth_map.valid.ravel())
    k = sample_count(rate, flat.size)
    if flat.size == 0:
        log.warning("no valid depth pixels to sample")
    if k == flat.size:
        chosen = flat
    else:
        if rng is None:
            raise ValueError("sparsify needs an rng when sampling a subset")
        chosen = np.sort(rng.choice(flat, size=k, replace=False))
    w = depth_map.depth.shape[1]
    v, u = np.divmod(chosen, w)
    return SparseDepthObservation(u.astype(np.int64), v.astype(np.int64),
                                  depth_map.depth.ravel()[chosen].astype(np.float64),
                                  camera, int(flat.size), empty=flat.size == 0)


def back_project(obs: SparseDepthObservation, depth=None) -> np.ndarray:
    """World-frame 3D points of the observation samples."""
    depth = obs.depth if depth is None else depth
    dirs = obs.camera.pixel_rays(obs.u, obs.v)
    return np.asarray(obs.camera.position, float) + depth[:, None] * dirs


@dataclass
class ObservationGrid:
    evidence: np.ndarray
    mask: np.ndarray
    dropped: int = 0

    def stacked(self) -> np.ndarray:
        return np.stack([self.evidence, self.mask])


def voxelize_observation(obs: SparseDepthObservation, n: int,
                         extent: float = VOLUME_EXTENT, depth_scale: float = 1.0) -> ObservationGrid:
    """Mark the voxel containing each back-projected sample in both channels.

    Samples with non-positive depth or landing outside the volume are dropped.
    """
    if len(obs) and (np.any(obs.u < 0) or np.any(obs.u >= obs.camera.width)
                     or np.any(obs.v < 0) or np.any(obs.v >= obs.camera.height)):
        raise ValueError("observation samples fall outside the image")
    evidence = np.zeros((n, n, n))
    depth = obs.depth * depth_scale
    ahead = depth > 0
    pts = back_project(obs, depth)
    ijk = np.floor(pts / (extent / n)).astype(np.int64)
    inside = ahead & np.all((ijk >= 0) & (ijk < n), axis=1)
    ijk = ijk[inside]
    evidence[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = 1.0
    return ObservationGrid(evidence, evidence.copy(), int((~inside).sum()))


# ------------------------------------------------------------ augmentation

@dataclass
class Sample:
    gt: np.ndarray
    observation: SparseDepthObservation
    evidence: np.ndarray
    mask: np.ndarray
    flipped: bool = False

    def input_channels(self) -> np.ndarray:
        return np.stack([self.evidence, self.mask])


def flip_x(grid: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(grid[::-1])


def augment(sample: Sample, rng: np.random.Generator, extent: float = VOLUME_EXTENT,
            flip: bool | None = None, scale: float | None = None) -> Sample:
    """Random depth scaling in [0.95, 1.05] (re-voxelized) and a 50% mirror along x.

    ``flip`` and ``scale`` override the random draws.
    """
    draw_flip = rng.random() < 0.5
    draw_scale = rng.uniform(0.95, 1.05)
    flip = draw_flip if flip is None else flip
    scale = draw_scale if scale is None else scale
    out = replace(sample)
    if scale != 1.0:
        og = voxelize_observation(sample.observation, sample.gt.shape[0], extent, scale)
        ev, mk = og.evidence, og.mask
        if sample.flipped:
            ev, mk = flip_x(ev), flip_x(mk)
        out = replace(out, evidence=ev, mask=mk)
    if flip:
        out = replace(out, gt=flip_x(out.gt), evidence=flip_x(out.evidence),
                      mask=flip_x(out.mask), flipped=not out.flipped)
    return out


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class DataConfig:
    grid_n: int = 16
    extent: float = VOLUME_EXTENT
    image_width: int = 64
    image_height: int = 64
    sparsity: float = 0.05
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def digest(self) -> str:
        text = "".join(f"{k} = {v}\n" for k, v in asdict(self).items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class DatasetManifest:
    split: str
    seed: int
    config_hash: str
    paths: list
    info: dict = field(default_factory=dict)

    def text(self) -> str:
        head = {"split": self.split, "seed": self.seed, "config_hash": self.config_hash,
                **self.info, "scenes": len(self.paths)}
        return "".join(f"{k} = {v}\n" for k, v in head.items()) + "".join(
            f"{p}\n" for p in self.paths)

    @classmethod
    def parse(cls, text: str) -> "DatasetManifest":
        info, paths = {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            if " = " in line:
                k, _, v = line.partition(" = ")
                info[k.strip()] = v.strip()
            else:
                paths.append(line.strip())
        m = cls(info.pop("split"), int(info.pop("seed")), info.pop("config_hash"), paths, info)
        if int(m.info.pop("scenes")) != len(paths):
            raise ValueError("manifest scene count does not match its path list")
        return m


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_sample(seed: int, index: int, cfg: DataConfig) -> Sample:
    """Scene, camera, render, sparsify and voxelize from one derived RNG stream."""
    rng = scene_rng(seed, index)
    spec = sample_scene_spec(rng, cfg.grid_n, cfg.extent)
    gt = generate_scene(spec)
    for _ in range(16):
        cam = sample_camera(rng, cfg.image_width, cfg.image_height, cfg.extent)
        dmap = render_depth(gt, cam, cfg.extent)
        if dmap.valid.any():
            break
    obs = sparsify(dmap, cam, cfg.sparsity, rng)
    og = voxelize_observation(obs, cfg.grid_n, cfg.extent)
    return Sample(gt, obs, og.evidence, og.mask)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_observation(path, obs: SparseDepthObservation) -> None:
    c = obs.camera
    lines = [f"width = {c.width}", f"height = {c.height}",
             f"fx = {_fmt(c.fx)}", f"fy = {_fmt(c.fy)}", f"cx = {_fmt(c.cx)}", f"cy = {_fmt(c.cy)}",
             "position = " + " ".join(_fmt(x) for x in c.position),
             "target = " + " ".join(_fmt(x) for x in c.target),
             f"valid_pixels = {obs.valid_pixels}", f"samples = {len(obs)}"]
    lines += [f"{u} {v} {_fmt(d)}" for u, v, d in zip(obs.u, obs.v, obs.depth)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_observation(path) -> SparseDepthObservation:
    head, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if " = " in line:
            k, _, v = line.partition(" = ")
            head[k] = v
        elif line.strip():
            rows.append(line.split())
    cam = Camera(float(head["fx"]), float(head["fy"]), float(head["cx"]), float(head["cy"]),
                 int(head["width"]), int(head["height"]),
                 tuple(float(x) for x in head["position"].split()),
                 tuple(float(x) for x in head["target"].split()))
    if int(head["samples"]) != len(rows):
        raise ValueError(f"{path}: sample count mismatch")
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    depth = arr[:, 2]
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError(f"{path}: depths must be finite and positive")
    return SparseDepthObservation(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64),
                                  depth, cam, int(head["valid_pixels"]),
                                  empty=int(head["valid_pixels"]) == 0)


def generate_dataset(out_dir, cfg: DataConfig = DataConfig(), seed: int = 0) -> dict[str, DatasetManifest]:
    """Write ``<split>/scene_XXXX.{vxg,obs}`` plus one ``<split>.manifest`` per split."""
    if cfg.sparsity <= 0:
        raise ValueError("sparsity rate 0 yields no observations; dataset would be untrainable")
    root = Path(out_dir)
    manifests = {}
    index = 0
    for split, count in cfg.split_sizes().items():
        (root / split).mkdir(parents=True, exist_ok=True)
        paths, samples, valid, dropped = [], 0, 0, 0
        for _ in range(count):
            s = make_sample(seed, index, cfg)
            stem = f"{split}/scene_{index:04d}"
            write_vxg(root / f"{stem}.vxg", s.gt)
            write_observation(root / f"{stem}.obs", s.observation)
            paths.append(f"{stem}.vxg")
            samples += len(s.observation)
            valid += s.observation.valid_pixels
            dropped += int(voxelize_observation(s.observation, cfg.grid_n, cfg.extent).dropped)
            index += 1
        info = {**{k: v for k, v in asdict(cfg).items()},
                "samples_total": samples, "valid_pixels_total": valid,
                "dropped_total": dropped,
                "observed_rate": _fmt(samples / valid) if valid else "nan"}
        m = DatasetManifest(split, seed, cfg.digest(), paths, info)
        (root / f"{split}.manifest").write_text(m.text())
        manifests[split] = m
    return manifests


def config_from_manifest(m: DatasetManifest) -> DataConfig:
    kw = {}
    for f, default in asdict(DataConfig()).items():
        if f in m.info:
            kw[f] = type(default)(m.info[f])
    return DataConfig(**kw)


@dataclass
class Dataset:
    split: str
    samples: list
    config: DataConfig
    manifest: DatasetManifest

    def __len__(self):
        return len(self.samples)

    def gt(self) -> np.ndarray:
        return np.stack([s.gt for s in self.samples])

    def inputs(self) -> np.ndarray:
        return np.stack([s.input_channels() for s in self.samples])


def load_split(root, split: str) -> Dataset:
    root = Path(root)
    path = root / f"{split}.manifest"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    m = DatasetManifest.parse(path.read_text())
    cfg = config_from_manifest(m)
    if cfg.digest() != m.config_hash:
        raise ValueError(f"{path}: config hash mismatch")
    samples = []
    for rel in m.paths:
        gt = read_vxg(root / rel)
        obs = read_observation((root / rel).with_suffix(".obs"))
        og = voxelize_observation(obs, cfg.grid_n, cfg.extent)
        samples.append(Sample(gt, obs, og.evidence, og.mask))
    return Dataset(split, samples, cfg, m)
