"""Gaussian splat attributes, cameras, and the closed-form covariance/colour math."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

SH_C0 = 0.28209479177387814
DEPTH_EPS = 1e-4


class DegenerateQuaternionError(ValueError):
    pass


class CulledGaussian(Exception):
    """Raised when a Gaussian cannot be projected (behind the camera)."""


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n <= 1e-12:
        raise DegenerateQuaternionError(f"quaternion norm {n:g} too small")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_normalize_batch(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise DegenerateQuaternionError("batch contains a near-zero quaternion")
    q = q / n
    return np.where(q[..., :1] < 0, -q, q)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion in (w, x, y, z) order.

    Accepts a single quaternion or a batch shaped (..., 4).
    """
    q = np.asarray(q, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-6):
        raise ValueError("quat_to_rotmat expects a unit quaternion")
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def covariance3d(q, s) -> np.ndarray:
    """R diag(s)^2 R^T, batched over leading axes."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be strictly positive")
    R = quat_to_rotmat(q)
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera transform x_c = R x_w + t.

    Camera space follows the usual vision convention: +z forward, +x right, +y down.
    Pixel centres sit at integer + 0.5.
    """

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))

    @property
    def position(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.t

    @classmethod
    def look_at(cls, eye, target, up, fov_deg: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(R, -R @ eye, f, f, width / 2, height / 2, width, height)


def project_covariance(sigma: np.ndarray, cam: Camera, mu, orthographic: bool = False) -> np.ndarray:
    """2x2 screen-space covariance J W Sigma W^T J^T with row/column 3 dropped.

    ``orthographic=True`` uses a truncated identity for J (debug mode).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    W = cam.R
    if orthographic:
        J = np.eye(3)[:2]
    else:
        x, y, z = cam.to_camera(mu)
        if z <= DEPTH_EPS:
            raise CulledGaussian("centre behind camera")
        J = np.array(
            [[cam.fx / z, 0.0, -cam.fx * x / (z * z)],
             [0.0, cam.fy / z, -cam.fy * y / (z * z)]]
        )
    T = J @ W
    out = T @ sigma @ T.T
    return 0.5 * (out + out.T)


def sh_color(y, view_dir=None) -> np.ndarray:
    """RGB colour from band-0 SH coefficients; view-independent for k == 3."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != 3:
        raise ValueError(f"unsupported SH coefficient count {y.shape[-1]} (only k=3)")
    return np.clip(y * SH_C0 + 0.5, 0.0, 1.0)


def rgb_to_sh(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    y: np.ndarray
    r: np.ndarray
    s: np.ndarray
    sigma_logit: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.sigma_logit))


@dataclass
class Scene:
    """Struct-of-arrays Gaussian collection.

    mu (N,3), sh (N,k), rot (N,4) unit (w,x,y,z), scale (N,3) > 0, opacity_logit (N,).
    """

    mu: np.ndarray
    sh: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity_logit: np.ndarray
    bounds: tuple = field(default=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh.reshape(n, sh.shape[-1] if sh.ndim > 1 else -1)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(n, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        lo, hi = self.bounds
        self.bounds = (tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    def __len__(self) -> int:
        return len(self.mu)

    def __iter__(self) -> Iterator[Gaussian]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i], self.sh[i], self.rot[i], self.scale[i], float(self.opacity_logit[i]))

    @classmethod
    def from_gaussians(cls, gaussians, bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> "Scene":
        gaussians = list(gaussians)
        return cls(
            mu=[g.mu for g in gaussians],
            sh=[g.y for g in gaussians],
            rot=[g.r for g in gaussians],
            scale=[g.s for g in gaussians],
            opacity_logit=[g.sigma_logit for g in gaussians],
            bounds=bounds,
        )

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def colors(self) -> np.ndarray:
        return sh_color(self.sh)

    def subset(self, idx) -> "Scene":
        return Scene(self.mu[idx], self.sh[idx], self.rot[idx], self.scale[idx], self.opacity_logit[idx], self.bounds)

    def copy(self) -> "Scene":
        return self.subset(slice(None))

    def check(self) -> None:
        if not np.allclose(np.linalg.norm(self.rot, axis=1), 1.0, atol=1e-6):
            raise ValueError("non-unit quaternion in scene")
        if np.any(self.scale <= 0):
            raise ValueError("non-positive scale in scene")
