"""Deterministic CPU splatting renderer plus a brute-force per-pixel reference.

Images are float arrays shaped (height, width, 3) with values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .gauss import DEPTH_EPS, Camera, CulledGaussian, Scene, covariance3d, project_covariance, sh_color


@dataclass(frozen=True)
class RenderConfig:
    background: tuple = (0.0, 0.0, 0.0)
    opacity_cutoff: float = 1.0 / 255.0
    weight_floor: float = 1e-4
    # Half-width of the screen-space box in standard deviations; None derives it from
    # weight_floor so the box never drops a contribution the floor would keep.
    box_sigmas: float | None = None
    lowpass_dilation: float = 0.0

    @property
    def box_extent(self) -> float:
        if self.box_sigmas is not None:
            return self.box_sigmas
        return float(np.sqrt(2.0 * np.log(1.0 / self.weight_floor)))


def gaussian2d_weight(p, mu2d, sigma2d) -> float | None:
    """exp(-0.5 d^T Sigma^-1 d); None when the covariance is singular (culled)."""
    sigma2d = np.asarray(sigma2d, dtype=np.float64)
    if np.linalg.det(sigma2d) <= 1e-12:
        return None
    d = np.asarray(p, dtype=np.float64) - np.asarray(mu2d, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(sigma2d, d)))


def composite_pixel(contribs, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Front-to-back alpha compositing of (color, opacity, weight) triples."""
    out = np.zeros(3)
    T = 1.0
    for color, opacity, weight in contribs:
        a = opacity * weight
        out += np.asarray(color, dtype=np.float64) * a * T
        T *= 1.0 - a
    return out + T * np.asarray(background, dtype=np.float64)


@dataclass
class _Projected:
    order: np.ndarray  # indices into the scene, front to back
    mean2d: np.ndarray
    conic: np.ndarray  # inverse 2D covariance, (n, 3): a, b, c for [[a, b], [b, c]]
    cov2d: np.ndarray
    color: np.ndarray
    opacity: np.ndarray


def _tie_keys(scene: Scene, idx) -> np.ndarray:
    return np.concatenate([scene.mu[idx], scene.sh[idx], scene.opacity_logit[idx, None],
                           scene.scale[idx], scene.rot[idx]], axis=1)


def _project(scene: Scene, cam: Camera, cfg: RenderConfig) -> _Projected:
    opacity = scene.opacity
    pc = cam.to_camera(scene.mu)
    keep = (opacity >= cfg.opacity_cutoff) & (pc[:, 2] > DEPTH_EPS)
    idx = np.nonzero(keep)[0]
    pc = pc[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    T = J @ cam.R
    cov3 = covariance3d(scene.rot[idx], scene.scale[idx])
    cov2 = T @ cov3 @ np.swapaxes(T, 1, 2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))
    cov2[:, 0, 0] += cfg.lowpass_dilation
    cov2[:, 1, 1] += cfg.lowpass_dilation
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    ok = det > 1e-12
    idx, z, det, cov2 = idx[ok], z[ok], det[ok], cov2[ok]
    mean2d = np.stack([cam.fx * x[ok] / z + cam.cx, cam.fy * y[ok] / z + cam.cy], axis=1)
    conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=1)
    # depth first, ties broken by lexicographic centre (then the remaining attributes)
    # so input order never matters
    keys = _tie_keys(scene, idx)
    order = np.lexsort(tuple(keys[:, ::-1].T) + (z,))
    return _Projected(
        order=idx[order],
        mean2d=mean2d[order],
        conic=conic[order],
        cov2d=cov2[order],
        color=sh_color(scene.sh[idx[order]]),
        opacity=opacity[idx[order]],
    )


def render(scene: Scene, cam: Camera, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    color, T = render_with_transmittance(scene, cam, cfg)
    return color + T[..., None] * np.asarray(cfg.background, dtype=np.float64)


def render_with_transmittance(scene: Scene, cam: Camera, cfg: RenderConfig = RenderConfig()):
    """Background-free colour and the final per-pixel transmittance."""
    W, H = cam.width, cam.height
    if W <= 0 or H <= 0:
        raise ValueError("image must have at least one pixel")
    color = np.zeros((H, W, 3))
    T = np.ones((H, W))
    if len(scene):
        P = _project(scene, cam, cfg)
        k = cfg.box_extent
        for i in range(len(P.order)):
            mx, my = P.mean2d[i]
            rx = k * np.sqrt(P.cov2d[i, 0, 0])
            ry = k * np.sqrt(P.cov2d[i, 1, 1])
            x0 = max(int(np.floor(mx - rx - 0.5)), 0)
            x1 = min(int(np.ceil(mx + rx - 0.5)) + 1, W)
            y0 = max(int(np.floor(my - ry - 0.5)), 0)
            y1 = min(int(np.ceil(my + ry - 0.5)) + 1, H)
            if x0 >= x1 or y0 >= y1:
                continue
            dx = (np.arange(x0, x1) + 0.5 - mx)[None, :]
            dy = (np.arange(y0, y1) + 0.5 - my)[:, None]
            a, b, c = P.conic[i]
            g = np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
            alpha = np.where(g >= cfg.weight_floor, P.opacity[i] * g, 0.0)
            Tp = T[y0:y1, x0:x1]
            color[y0:y1, x0:x1] += (alpha * Tp)[..., None] * P.color[i]
            T[y0:y1, x0:x1] = Tp * (1.0 - alpha)
    return color, T


def render_oracle(scene: Scene, cam: Camera, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Every pixel against every Gaussian, no screen-space box.

    Projection goes through the scalar per-Gaussian helpers rather than the batched
    path in ``render``; only the weight floor, the culling rules and the
    depth/tie ordering are shared.
    """
    W, H = cam.width, cam.height
    bg = np.asarray(cfg.background, dtype=np.float64)
    rows = []
    keys = _tie_keys(scene, np.arange(len(scene)))
    for i, g in enumerate(scene):
        if g.opacity < cfg.opacity_cutoff:
            continue
        try:
            cov = project_covariance(covariance3d(g.r, g.s), cam, g.mu)
        except CulledGaussian:
            continue
        cov = cov + cfg.lowpass_dilation * np.eye(2)
        if np.linalg.det(cov) <= 1e-12:
            continue
        x, y, z = cam.to_camera(g.mu)
        mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        rows.append(((z, *keys[i]), mean, np.linalg.inv(cov), sh_color(g.y), g.opacity))
    rows.sort(key=lambda r: r[0])
    if not rows:
        return np.broadcast_to(bg, (H, W, 3)).copy()
    means = np.array([r[1] for r in rows])
    inv = np.array([r[2] for r in rows])
    colors = np.array([r[3] for r in rows])
    opac = np.array([r[4] for r in rows])
    out = np.empty((H, W, 3))
    for v in range(H):
        for u in range(W):
            d = np.array([u + 0.5, v + 0.5]) - means
            g = np.exp(-0.5 * np.einsum("ni,nij,nj->n", d, inv, d))
            alpha = np.where(g >= cfg.weight_floor, opac * g, 0.0)
            trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)])
            out[v, u] = (colors * (alpha * trans[:-1])[:, None]).sum(0) + trans[-1] * bg
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
