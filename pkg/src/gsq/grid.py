"""Sparse voxel-grid scenes and their K x K x K block partition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauss import Scene

OPACITY_LOGIT_THRESHOLD = 0.0


class EmptySceneError(ValueError):
    pass


def ceil_log2(n: int) -> int:
    """Smallest b with 2**b >= n (0 for n <= 1)."""
    return max(int(n) - 1, 0).bit_length()


def linearize_block_index(coord, B: int) -> int:
    x, y, z = (int(c) for c in coord)
    if not all(0 <= c < B for c in (x, y, z)):
        raise ValueError(f"block coordinate {coord} outside [0, {B})")
    return x + B * (y + B * z)


def delinearize_block_index(index: int, B: int) -> tuple[int, int, int]:
    index = int(index)
    if not 0 <= index < B**3:
        raise ValueError(f"block index {index} outside [0, {B ** 3})")
    return index % B, (index // B) % B, index // (B * B)


def block_index_bits(B: int) -> int:
    return ceil_log2(B**3)


@dataclass
class GridScene:
    """One Gaussian per occupied cell; centres are implied by the cell coordinates.

    ``cells`` is (n, 3) int, sorted by x-fastest linear cell index; the attribute
    arrays are aligned with it.
    """

    G: int
    cells: np.ndarray
    sh: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity_logit: np.ndarray
    bounds: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 3)
        if np.any(self.cells < 0) or np.any(self.cells >= self.G):
            raise ValueError("cell coordinate outside the grid")
        lin = self.cells[:, 0] + self.G * (self.cells[:, 1] + self.G * self.cells[:, 2])
        order = np.argsort(lin, kind="stable")
        if len(np.unique(lin)) != len(lin):
            raise ValueError("a cell holds more than one Gaussian")
        self.cells = self.cells[order]
        n = len(self.cells)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh.reshape(n, sh.shape[-1] if sh.ndim > 1 else -1)[order]
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(n, 4)[order]
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)[order]
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)[order]

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def cell_size(self) -> np.ndarray:
        lo, hi = (np.asarray(b) for b in self.bounds)
        return (hi - lo) / self.G

    def centers(self) -> np.ndarray:
        return grid_center(self.cells, self.G, self.bounds)

    def to_scene(self) -> Scene:
        return Scene(self.centers(), self.sh, self.rot, self.scale, self.opacity_logit, self.bounds)

    def with_attributes(self, **kw) -> "GridScene":
        fields = dict(sh=self.sh, rot=self.rot, scale=self.scale, opacity_logit=self.opacity_logit)
        fields.update(kw)
        return GridScene(self.G, self.cells, bounds=self.bounds, **fields)


def grid_center(cell, G: int, bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> np.ndarray:
    cell = np.asarray(cell)
    if np.any(cell < 0) or np.any(cell >= G):
        raise ValueError("cell coordinate outside the grid")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    return lo + (cell + 0.5) / G * (hi - lo)


def normalize_positions(mu: np.ndarray, bounds) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    return (np.asarray(mu, dtype=np.float64) - lo) / (hi - lo)


def voxelize(scene: Scene, G: int, K: int = 4, threshold: float = OPACITY_LOGIT_THRESHOLD) -> GridScene:
    """Snap Gaussians to grid cells.

    Gaussians with opacity logit below ``threshold`` are dropped. When several land
    in one cell the larger logit wins, then the larger scale product, then the
    lexicographically smaller centre.
    """
    if G < K or G % K:
        raise ValueError(f"grid resolution {G} must be a positive multiple of K={K}")
    keep = np.nonzero(scene.opacity_logit >= threshold)[0]
    if len(keep) == 0:
        raise EmptySceneError("every Gaussian fell below the opacity threshold")
    norm = normalize_positions(scene.mu[keep], scene.bounds)
    cells = np.clip(np.floor(norm * G).astype(np.int64), 0, G - 1)
    lin = cells[:, 0] + G * (cells[:, 1] + G * cells[:, 2])
    mu = scene.mu[keep]
    # lexsort: last key is primary; winners sort first inside each cell
    order = np.lexsort(
        (mu[:, 2], mu[:, 1], mu[:, 0], -np.prod(scene.scale[keep], axis=1), -scene.opacity_logit[keep], lin)
    )
    lin_sorted = lin[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = lin_sorted[1:] != lin_sorted[:-1]
    win = keep[order[first]]
    return GridScene(
        G=G,
        cells=cells[order[first]],
        sh=scene.sh[win],
        rot=scene.rot[win],
        scale=scene.scale[win],
        opacity_logit=scene.opacity_logit[win],
        bounds=scene.bounds,
    )


@dataclass
class Block:
    coord: tuple
    mask: np.ndarray  # (K, K, K) bool indexed [x, y, z]
    cell_rows: np.ndarray  # rows of the parent GridScene, in local x-fastest order

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass
class BlockLayout:
    """Array view of a block partition used by the codec."""

    K: int
    B: int
    coords: np.ndarray  # (M, 3) block coordinates, ascending linear index
    linear: np.ndarray  # (M,)
    cell_block: np.ndarray  # (n,) block row per occupied cell
    cell_local: np.ndarray  # (n,) local offset x + K(y + Kz)

    @property
    def M(self) -> int:
        return len(self.coords)

    def occupancy(self) -> np.ndarray:
        occ = np.zeros((self.M, self.K**3), dtype=bool)
        occ[self.cell_block, self.cell_local] = True
        return occ


def block_layout(gs: GridScene, K: int = 4) -> BlockLayout:
    if gs.G % K:
        raise ValueError(f"grid resolution {gs.G} not divisible by K={K}")
    B = gs.G // K
    bc = gs.cells // K
    local = gs.cells % K
    lin = bc[:, 0] + B * (bc[:, 1] + B * bc[:, 2])
    uniq, inverse = np.unique(lin, return_inverse=True)
    coords = np.stack([uniq % B, (uniq // B) % B, uniq // (B * B)], axis=1)
    return BlockLayout(
        K=K, B=B, coords=coords, linear=uniq, cell_block=inverse.reshape(-1),
        cell_local=local[:, 0] + K * (local[:, 1] + K * local[:, 2]),
    )


def partition_blocks(gs: GridScene, K: int = 4) -> list[Block]:
    lay = block_layout(gs, K)
    blocks = []
    for m in range(lay.M):
        rows = np.nonzero(lay.cell_block == m)[0]
        rows = rows[np.argsort(lay.cell_local[rows], kind="stable")]
        mask = np.zeros(K**3, dtype=bool)
        mask[lay.cell_local[rows]] = True
        blocks.append(Block(tuple(int(c) for c in lay.coords[m]), mask.reshape(K, K, K, order="F"), rows))
    return blocks


def scatter_blocks(blocks: list[Block], gs: GridScene, K: int = 4) -> GridScene:
    """Reassemble a GridScene from its blocks (inverse of partition_blocks)."""
    cells, rows = [], []
    for b in blocks:
        local = np.argwhere(b.mask.reshape(-1, order="F"))[:, 0]
        off = np.stack([local % K, (local // K) % K, local // (K * K)], axis=1)
        cells.append(np.asarray(b.coord) * K + off)
        rows.append(b.cell_rows)
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cells = np.concatenate(cells) if cells else np.zeros((0, 3), dtype=np.int64)
    return GridScene(gs.G, cells, gs.sh[rows], gs.rot[rows], gs.scale[rows], gs.opacity_logit[rows], gs.bounds)
