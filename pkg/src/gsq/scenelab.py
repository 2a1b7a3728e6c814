"""Procedural scenes, simulated appearance changes, camera rigs and datasets."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gauss import Camera, Scene, quat_normalize_batch, quat_to_rotmat, rgb_to_sh

AMBIENT = 0.3
ELEVATION_DEG = 20.0
WORLD_UP = (0.0, 0.0, 1.0)
SCENE_CENTER = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class ChangeSpec:
    color_axis: tuple = (1.0, 0.0, 0.0)
    color_angle: float = 0.0
    light_dir: tuple = (0.0, 0.0, 1.0)
    light_color: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        axis = np.asarray(self.color_axis, dtype=np.float64)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("color_axis must be a unit vector")
        if np.any(np.asarray(self.light_color) <= 0):
            raise ValueError("light gains must be positive")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "ChangeSpec":
        # colour axis from the positive octant: the grey diagonal is the typical case and
        # rotated colours stay mostly inside the RGB cube instead of clamping to black
        axis = np.abs(rng.normal(size=3))
        light = rng.normal(size=3)
        return cls(
            color_axis=tuple(axis / np.linalg.norm(axis)),
            color_angle=float(rng.uniform(-np.pi, np.pi)),
            light_dir=tuple(light / np.linalg.norm(light)),
            light_color=tuple(rng.uniform(0.6, 1.2, size=3)),
        )


def rodrigues(axis, angle: float) -> np.ndarray:
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx


def rotate_colors(rgb: np.ndarray, axis, angle: float) -> np.ndarray:
    """Rotate RGB vectors about ``axis`` through the origin of colour space (no clamping)."""
    return np.asarray(rgb, dtype=np.float64) @ rodrigues(axis, angle).T


def normal_proxy(rot: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Unit principal axis of the shortest scale of each Gaussian."""
    R = quat_to_rotmat(rot)
    k = np.argmin(scale, axis=1)
    return R[np.arange(len(k)), :, k]


def lighting_factor(rot, scale, light_dir, ambient: float = AMBIENT) -> np.ndarray:
    # surfel normals have no sign, so the proxy is two-sided
    ndotl = np.abs(normal_proxy(rot, scale) @ np.asarray(light_dir, dtype=np.float64))
    return ambient + (1.0 - ambient) * ndotl


def simulate_change(scene: Scene, spec: ChangeSpec) -> Scene:
    """Rotate texture colours, then relight with a Lambertian surfel proxy. Geometry is untouched."""
    rgb = scene.sh * 0.28209479177387814 + 0.5
    rgb = np.clip(rotate_colors(rgb, spec.color_axis, spec.color_angle), 0.0, 1.0)
    shade = lighting_factor(scene.rot, scene.scale, spec.light_dir)[:, None]
    rgb = np.clip(rgb * shade * np.asarray(spec.light_color)[None, :], 0.0, 1.0)
    out = scene.copy()
    out.sh = rgb_to_sh(rgb)
    return out


# -- scene generation --------------------------------------------------------

def _random_rotation(rng) -> np.ndarray:
    return quat_to_rotmat(quat_normalize_batch(rng.normal(size=4)))


def _rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Batched rotation matrix -> (w, x, y, z), robust branch selection."""
    out = np.empty((len(R), 4))
    for i, m in enumerate(R):
        tr = np.trace(m)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        out[i] = q
    return quat_normalize_batch(out)


def _surface_samples(kind: str, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Points and unit normals on a canonical primitive centred at the origin."""
    if kind == "ellipsoid":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v, v.copy()
    if kind == "box":
        face = rng.integers(6, size=n)
        p = rng.uniform(-1, 1, size=(n, 3))
        axis, sign = face % 3, np.where(face < 3, 1.0, -1.0)
        p[np.arange(n), axis] = sign
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return p, nrm
    if kind == "torus":
        R, r = 0.7, 0.3
        u, v = rng.uniform(0, 2 * np.pi, size=(2, n))
        nrm = np.stack([np.cos(u) * np.cos(v), np.sin(u) * np.cos(v), np.sin(v)], axis=1)
        centre = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], axis=1)
        return centre + r * nrm, nrm
    raise ValueError(f"unknown primitive {kind!r}")


def _surfel_cells(kind, size, R, centre, density, rng):
    """One surfel per voxel (at ``density`` cells per unit) crossed by the shell."""
    p, nrm = _surface_samples(kind, 4000, rng)
    world = centre + (p * size) @ R.T
    n_world = (nrm / size) @ R.T
    _, inv = np.unique(np.floor(world * density).astype(np.int64), axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = inv.max() + 1
    cnt = np.bincount(inv, minlength=m)[:, None]
    mu = np.stack([np.bincount(inv, world[:, j], m) for j in range(3)], 1) / cnt
    nv = np.stack([np.bincount(inv, n_world[:, j], m) for j in range(3)], 1)
    bad = np.linalg.norm(nv, axis=1) < 1e-9
    first = np.empty(m, dtype=np.int64)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    nv[bad] = n_world[first[bad]]
    return mu, nv / np.linalg.norm(nv, axis=1, keepdims=True)


def gen_scene(seed: int, complexity: str = "tiny", density: int = 16) -> Scene:
    """Clusters of surfel-like Gaussians on random ellipsoid/box/torus shells inside [0,1]^3.

    Each shell is covered by one Gaussian per crossed voxel of a ``density``^3
    lattice, so the occupied cell set follows from the shape alone. Shells are
    shrunk uniformly until the total fits the complexity budget.
    """
    if complexity not in ("tiny", "small"):
        raise ValueError("complexity must be 'tiny' or 'small'")
    rng = np.random.default_rng(seed)
    budget = 200 if complexity == "tiny" else 500
    k = int(rng.integers(3, 6)) if complexity == "tiny" else int(rng.integers(5, 11))
    prims = []
    for _ in range(k):
        prims.append(dict(
            kind=["ellipsoid", "box", "torus"][rng.integers(3)],
            size=rng.uniform(0.05, 0.12, size=3) * (1.0 if complexity == "tiny" else 1.2),
            R=_random_rotation(rng),
            centre=rng.uniform(0.3, 0.7, size=3),
            base=rng.uniform(0.1, 0.9, size=3),
            seed=int(rng.integers(2**31)),
        ))
    shrink = 1.0
    while True:
        parts = [_surfel_cells(q["kind"], q["size"] * shrink, q["R"], q["centre"], density,
                               np.random.default_rng(q["seed"])) for q in prims]
        total = sum(len(m) for m, _ in parts)
        if total <= budget or shrink < 0.2:
            break
        shrink *= 0.9
    mu = np.clip(np.concatenate([m for m, _ in parts]), 0.02, 0.98)
    normals = np.concatenate([nv for _, nv in parts])
    cols = np.concatenate([np.clip(q["base"] + rng.normal(scale=0.04, size=(len(m), 3)), 0.02, 0.98)
                           for q, (m, _) in zip(prims, parts)])
    # frame whose third axis is the surface normal; shortest scale along it
    t1 = np.cross(normals, np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]]))
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    rot = _rotmat_to_quat(np.stack([t1, t2, normals], axis=2))
    n = len(mu)
    cell = 1.0 / density
    scale = np.stack([rng.uniform(0.4, 0.6, n) * cell, rng.uniform(0.4, 0.6, n) * cell,
                      rng.uniform(0.06, 0.12, n) * cell], 1)
    return Scene(
        mu=mu,
        sh=rgb_to_sh(cols),
        rot=rot,
        scale=scale,
        opacity_logit=rng.uniform(0.5, 4.0, size=n),
    )


# -- cameras -----------------------------------------------------------------

@dataclass(frozen=True)
class CameraSpec:
    """Line-oriented camera description: position, look-at, up, fov, width, height."""

    position: tuple
    look_at: tuple
    up: tuple
    fov_deg: float
    width: int
    height: int

    def camera(self) -> Camera:
        return Camera.look_at(self.position, self.look_at, self.up, self.fov_deg, self.width, self.height)


def rig_specs(n: int, radius: float = 1.8, target=SCENE_CENTER, elevation_deg: float = ELEVATION_DEG,
              fov_deg: float = 35.0, width: int = 64, height: int = 64,
              azimuth_offset_deg: float = 0.0) -> list[CameraSpec]:
    if n < 1:
        raise ValueError("need at least one camera")
    el = np.radians(elevation_deg)
    out = []
    for i in range(n):
        az = np.radians(azimuth_offset_deg + i * 360.0 / n)
        eye = np.asarray(target) + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        out.append(CameraSpec(tuple(eye), tuple(target), WORLD_UP, fov_deg, width, height))
    return out


def sample_cameras(n: int, radius: float = 1.8, target=SCENE_CENTER, elevation_deg: float = ELEVATION_DEG,
                   fov_deg: float = 35.0, width: int = 64, height: int = 64,
                   azimuth_offset_deg: float = 0.0) -> list[Camera]:
    """n cameras evenly spaced in azimuth at a fixed elevation, all looking at ``target``."""
    specs = rig_specs(n, radius, target, elevation_deg, fov_deg, width, height, azimuth_offset_deg)
    return [s.camera() for s in specs]


def write_cameras(path, specs: list[CameraSpec]) -> None:
    lines = ["# px py pz  tx ty tz  ux uy uz  fov_deg width height"]
    for s in specs:
        vals = [*s.position, *s.look_at, *s.up]
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {float(s.fov_deg)!r} {s.width} {s.height}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[CameraSpec]:
    specs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 12:
            raise ValueError(f"{path}:{n}: expected 12 fields, got {len(parts)}")
        v = [float(x) for x in parts[:10]]
        specs.append(CameraSpec(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), v[9], int(parts[10]), int(parts[11])))
    return specs


# -- datasets ----------------------------------------------------------------

@dataclass
class SceneRecord:
    scene_id: str
    seed: int
    split: str
    change: ChangeSpec
    n_images: int
    archived: Scene = field(repr=False)
    changed: Scene = field(repr=False)


@dataclass
class DatasetSplit:
    train: list[SceneRecord]
    test: list[SceneRecord]
    seed: int

    @property
    def train_seeds(self) -> list[int]:
        return [r.seed for r in self.train]

    @property
    def test_seeds(self) -> list[int]:
        return [r.seed for r in self.test]


def make_record(scene_id: str, seed: int, split: str, change: ChangeSpec, n_images: int,
                complexity: str = "tiny") -> SceneRecord:
    archived = gen_scene(seed, complexity)
    return SceneRecord(scene_id, seed, split, change, n_images, archived, simulate_change(archived, change))


def dataset_plan(n_train: int, n_test: int, seed: int = 0, max_images: int = 6) -> list[tuple]:
    """Seeded (scene_id, scene seed, split, change, image count) rows, without building scenes."""
    if n_train < 1 or n_test < 1:
        raise ValueError("both splits need at least one scene")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=n_train + n_test, replace=False)
    rows = []
    for i, s in enumerate(seeds):
        split = "train" if i < n_train else "test"
        change = ChangeSpec.random(rng)
        n_img = int(rng.integers(1, max_images + 1))
        sid = f"{split}-{i if split == 'train' else i - n_train:04d}"
        rows.append((sid, int(s), split, change, n_img))
    return rows


def build_dataset(n_train: int, n_test: int, seed: int = 0, complexity: str = "tiny",
                  max_images: int = 6) -> DatasetSplit:
    records = [make_record(*row, complexity) for row in dataset_plan(n_train, n_test, seed, max_images)]
    return DatasetSplit(records[:n_train], records[n_train:], seed)


def write_manifest(path, ds: DatasetSplit, complexity: str = "tiny") -> None:
    lines = [f"# master_seed {ds.seed} complexity {complexity}",
             "# scene_id seed split axis_x axis_y axis_z angle light_x light_y light_z gain_r gain_g gain_b n_images"]
    for r in ds.train + ds.test:
        c = r.change
        vals = [*c.color_axis, c.color_angle, *c.light_dir, *c.light_color]
        lines.append(f"{r.scene_id} {r.seed} {r.split} " + " ".join(repr(float(v)) for v in vals) + f" {r.n_images}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetSplit:
    train, test, seed, complexity = [], [], 0, "tiny"
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.startswith("# master_seed"):
            parts = line.split()
            seed, complexity = int(parts[2]), parts[4]
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        p = line.split()
        if len(p) != 14:
            raise ValueError(f"{path}:{n}: expected 14 fields, got {len(p)}")
        v = [float(x) for x in p[3:13]]
        change = ChangeSpec(tuple(v[0:3]), v[3], tuple(v[4:7]), tuple(v[7:10]))
        rec = make_record(p[0], int(p[1]), p[2], change, int(p[13]), complexity)
        (train if p[2] == "train" else test).append(rec)
    return DatasetSplit(train, test, seed)
