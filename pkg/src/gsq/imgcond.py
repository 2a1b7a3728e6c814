"""Image features, proxy-sphere visibility, and visibility-weighted aggregation onto grids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .gauss import DEPTH_EPS, Camera
from .grid import GridScene, block_layout

N_LEVELS = 3
N_FIXED = 12  # RGB, d/dx, d/dy, 3x3 mean
VIS_THRESHOLD = 0.5


def _pool2(img: np.ndarray) -> np.ndarray:
    H, W = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    x = img[:H, :W]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _level_features(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    mean = sum(p[dy:dy + img.shape[0], dx:dx + img.shape[1]] for dy in range(3) for dx in range(3)) / 9.0
    return np.concatenate([img, gx, gy, mean], axis=-1)


def fixed_features(img: np.ndarray, levels: int = N_LEVELS) -> list[np.ndarray]:
    """Hand-made per-level features (H_l, W_l, 12); each level halves the previous one."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("expected a non-empty (H, W, 3) image")
    out, cur = [], img
    for _ in range(levels):
        out.append(_level_features(cur))
        cur = _pool2(cur)
    return out


class FeatureExtractor(nn.Module):
    """Trainable pointwise projection of the fixed features to d_img channels."""

    def __init__(self, d_img: int = 16):
        super().__init__()
        self.d_img = d_img
        self.proj = nn.Linear(N_FIXED, d_img)

    def forward(self, feats):
        return self.proj(feats)


@dataclass
class FeaturePyramid:
    levels: list  # [(scale, tensor (H_l, W_l, d_img))]
    camera: Camera | None = None


def extract_feature_pyramid(img: np.ndarray, extractor: FeatureExtractor, cam: Camera | None = None) -> FeaturePyramid:
    levels = []
    for l, f in enumerate(fixed_features(img)):
        t = torch.as_tensor(f, dtype=extractor.proj.weight.dtype)
        levels.append((2**l, extractor(t)))
    return FeaturePyramid(levels, cam)


def project_points(P: np.ndarray, cam: Camera):
    """Pixel coordinates (n, 2), depth (n,), and an in-view mask."""
    pc = cam.to_camera(np.asarray(P, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    safe = np.where(z > DEPTH_EPS, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / safe + cam.cx, cam.fy * pc[:, 1] / safe + cam.cy], axis=1)
    inview = (z > DEPTH_EPS) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    return uv, z, inview


def project_point(p, cam: Camera):
    """((u, v), depth) or None when behind the camera or outside the image."""
    uv, z, ok = project_points(np.asarray(p)[None], cam)
    return ((float(uv[0, 0]), float(uv[0, 1])), float(z[0])) if ok[0] else None


def bilinear_sample(fmap, uv: np.ndarray, scale: float = 1.0):
    """Sample (H, W, C) at pixel coordinates (pixel centres at +0.5), edge-clamped.

    Works for numpy arrays and torch tensors alike.
    """
    H, W = fmap.shape[0], fmap.shape[1]
    x = np.clip(uv[:, 0] / scale - 0.5, 0.0, W - 1.0)
    y = np.clip(uv[:, 1] / scale - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 1)
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    if isinstance(fmap, torch.Tensor):
        fx = torch.as_tensor(fx, dtype=fmap.dtype)[:, None]
        fy = torch.as_tensor(fy, dtype=fmap.dtype)[:, None]
    else:
        fx, fy = fx[:, None], fy[:, None]
    top = fmap[y0, x0] * (1 - fx) + fmap[y0, x1] * fx
    bot = fmap[y1, x0] * (1 - fx) + fmap[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sphere_visibility(points: np.ndarray, occ_centers: np.ndarray, occ_opacity: np.ndarray, radius: float,
                      eye: np.ndarray, own: np.ndarray | None = None) -> np.ndarray:
    """Transmittance from ``eye`` to each point through proxy spheres.

    A sphere occludes a point when the ray segment passes within ``radius`` of its
    centre and the centre is strictly nearer along the ray. ``own[i]`` names the
    sphere belonging to point i (or -1), which never occludes it.
    """
    d = points - eye
    dist = np.linalg.norm(d, axis=1)
    dirs = d / np.maximum(dist, 1e-12)[:, None]
    rel = occ_centers[None, :, :] - eye  # (1, n, 3)
    t = np.einsum("pk,pnk->pn", dirs, np.broadcast_to(rel, (len(points),) + rel.shape[1:]))
    perp2 = (rel**2).sum(-1) - t**2
    hit = (t > 0) & (t < dist[:, None]) & (perp2 < radius**2)
    if own is not None:
        rows = np.nonzero(own >= 0)[0]
        hit[rows, own[rows]] = False
    log_t = np.where(hit, np.log1p(-np.minimum(occ_opacity[None, :], 1 - 1e-12)), 0.0)
    return np.exp(log_t.sum(1))


def propagate_block_visibility(vis: np.ndarray, block_of: np.ndarray, n_blocks: int,
                               theta: float = VIS_THRESHOLD) -> np.ndarray:
    """If a block has any entry above ``theta`` every entry in it takes the block maximum."""
    bmax = np.full(n_blocks, -np.inf)
    np.maximum.at(bmax, block_of, vis)
    lifted = bmax[block_of]
    return np.where(lifted > theta, lifted, vis)


def estimate_visibility(gs: GridScene, cams: list[Camera], K: int = 4, theta: float = VIS_THRESHOLD) -> np.ndarray:
    """(V, n) visibility of every occupied cell per view, block-propagated."""
    lay = block_layout(gs, K)
    centers = gs.centers()
    radius = float(np.max(gs.cell_size))
    opac = 1.0 / (1.0 + np.exp(-gs.opacity_logit))
    own = np.arange(len(gs))
    out = []
    for cam in cams:
        v = sphere_visibility(centers, centers, opac, radius, cam.position, own)
        out.append(propagate_block_visibility(v, lay.cell_block, lay.M, theta))
    return np.stack(out) if out else np.zeros((0, len(gs)))


def aggregate_samples(samples, weights: np.ndarray):
    """Visibility-weighted mean over views plus a no-observation flag column.

    samples (V, P, C), weights (V, P) -> (P, C + 1). Rows with zero total weight
    become zeros with flag 1.
    """
    weights = np.asarray(weights, dtype=np.float64)
    V = weights.shape[0]
    P = weights.shape[1] if weights.ndim == 2 else 0
    tot = weights.sum(0) if V else np.zeros(P)
    seen = tot > 0
    norm = np.where(seen, weights / np.where(seen, tot, 1.0), 0.0)
    if isinstance(samples, torch.Tensor):
        w = torch.as_tensor(norm, dtype=samples.dtype)
        mean = (samples * w[..., None]).sum(0) if V else samples.new_zeros((P, samples.shape[-1]))
        flag = torch.as_tensor(~seen, dtype=samples.dtype)[:, None]
        return torch.cat([mean, flag], dim=1)
    samples = np.asarray(samples, dtype=np.float64)
    mean = (samples * norm[..., None]).sum(0) if V else np.zeros((P, samples.shape[-1]))
    return np.concatenate([mean, (~seen).astype(np.float64)[:, None]], axis=1)


def aggregate_grid_image_features(gs: GridScene, pyramids: list[FeaturePyramid], vis: np.ndarray,
                                  cams: list[Camera]):
    """Per-cell level-0 features averaged over views with visibility weights."""
    centers = gs.centers()
    samples, weights = [], []
    for pyr, cam, v in zip(pyramids, cams, vis):
        uv, _, ok = project_points(centers, cam)
        samples.append(bilinear_sample(pyr.levels[0][1], uv, pyr.levels[0][0]))
        weights.append(np.where(ok, v, 0.0))
    if not samples:
        return aggregate_samples(np.zeros((0, len(gs), 0)), np.zeros((0, len(gs))))
    stack = torch.stack(samples) if isinstance(samples[0], torch.Tensor) else np.stack(samples)
    return aggregate_samples(stack, np.stack(weights))


def pool_block_image_features(cell_feats, cell_block: np.ndarray, n_blocks: int):
    """Mean of observed (unflagged) cell features per block; all-flagged blocks -> zeros + flag."""
    is_t = isinstance(cell_feats, torch.Tensor)
    flags = (cell_feats[:, -1].detach().numpy() if is_t else np.asarray(cell_feats)[:, -1]) > 0.5
    w = np.zeros((n_blocks, len(cell_block)))
    w[cell_block, np.arange(len(cell_block))] = (~flags).astype(np.float64)
    cnt = w.sum(1)
    has = cnt > 0
    w = np.where(has[:, None], w / np.where(has, cnt, 1.0)[:, None], 0.0)
    if is_t:
        mean = torch.as_tensor(w, dtype=cell_feats.dtype) @ cell_feats[:, :-1]
        return torch.cat([mean, torch.as_tensor(~has, dtype=cell_feats.dtype)[:, None]], dim=1)
    mean = w @ np.asarray(cell_feats)[:, :-1]
    return np.concatenate([mean, (~has).astype(np.float64)[:, None]], axis=1)


# -- codec-facing: observations of candidate cells -----------------------------

@dataclass
class ViewObservation:
    """What one conditioning view says about a block layout (fixed features, pre-projection)."""

    cell_feats: np.ndarray  # (P, 12) level-0 samples at candidate cell centres
    cell_weight: np.ndarray  # (P,) visibility * in-view
    block_feats: np.ndarray  # (M, 12) level-2 samples at block centres
    block_weight: np.ndarray  # (M,)


def observe_view(cand_centers: np.ndarray, cand_block: np.ndarray, block_centers: np.ndarray,
                 occ_centers: np.ndarray, occ_opacity: np.ndarray, own: np.ndarray, radius: float,
                 cam: Camera, feats: list[np.ndarray], theta: float = VIS_THRESHOLD) -> ViewObservation:
    """Sample one view's features for every candidate cell of every block.

    Occluders are the occupied cells only (``occ_*``); ``own`` maps candidates to
    their occluder row (or -1).
    """
    M = len(block_centers)
    vis = sphere_visibility(cand_centers, occ_centers, occ_opacity, radius, cam.position, own)
    vis = propagate_block_visibility(vis, cand_block, M, theta)
    uv, _, ok = project_points(cand_centers, cam)
    cell_w = np.where(ok, vis, 0.0)
    bvis = np.full(M, 0.0)
    np.maximum.at(bvis, cand_block, vis)
    buv, _, bok = project_points(block_centers, cam)
    return ViewObservation(
        cell_feats=bilinear_sample(feats[0], uv, 1.0),
        cell_weight=cell_w,
        block_feats=bilinear_sample(feats[2], buv, 4.0),
        block_weight=np.where(bok, bvis, 0.0),
    )


@dataclass
class Conditioning:
    """Aggregated (pre-projection) image evidence for one scene; flags mark missing data."""

    cell: np.ndarray  # (P, 13)
    block_pool: np.ndarray  # (M, 13)
    block_coarse: np.ndarray  # (M, 13)

    @classmethod
    def null(cls, P: int, M: int) -> "Conditioning":
        def empty(n):
            z = np.zeros((n, N_FIXED + 1))
            z[:, -1] = 1.0
            return z
        return cls(empty(P), empty(M), empty(M))

    @property
    def n_cells(self) -> int:
        return len(self.cell)

    @property
    def is_null(self) -> bool:
        """True when no cell or block carries image evidence."""
        return bool(all((a[:, -1] == 1.0).all() for a in (self.cell, self.block_pool, self.block_coarse)))


def combine_observations(obs: list[ViewObservation], cand_block: np.ndarray, occupied: np.ndarray,
                         M: int) -> Conditioning:
    P = len(cand_block)
    if not obs:
        return Conditioning.null(P, M)
    cell = aggregate_samples(np.stack([o.cell_feats for o in obs]), np.stack([o.cell_weight for o in obs]))
    pool_in = cell.copy()
    pool_in[~occupied, -1] = 1.0  # pool over occupied cells only
    block_pool = pool_block_image_features(pool_in, cand_block, M)
    coarse = aggregate_samples(np.stack([o.block_feats for o in obs]), np.stack([o.block_weight for o in obs]))
    return Conditioning(cell, block_pool, coarse)


def project_conditioning(cond: Conditioning, extractor: FeatureExtractor):
    """Apply the trainable projection; flagged rows stay exactly zero.

    Returns (cell features (P, d+1), block features (M, 2(d+1))).
    """
    dtype = extractor.proj.weight.dtype

    def proj(a):
        t = torch.as_tensor(a, dtype=dtype)
        seen = (1.0 - t[:, -1:])
        return torch.cat([extractor(t[:, :-1]) * seen, t[:, -1:]], dim=1)

    cell = proj(cond.cell)
    block = torch.cat([proj(cond.block_pool), proj(cond.block_coarse)], dim=1)
    return cell, block
