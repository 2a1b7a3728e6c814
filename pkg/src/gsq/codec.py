"""Grid-block encoder, geometry/texture RVQ, and the image-conditioned decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import imgcond
from .gauss import Scene, quat_normalize_batch
from .grid import BlockLayout, GridScene, block_layout, ceil_log2, grid_center, voxelize
from .imgcond import Conditioning, FeatureExtractor
from .nn import BlockReducer, SparseMixer, neighbor_table
from .rvq import CorruptStreamError, RvqCodec, random_codec, straight_through

LOG_SCALE_MIN = float(np.log(1e-4))
LOG_SCALE_MAX = 0.0
STAGES = ("scene", "coarse", "fine")


@dataclass(frozen=True)
class CodecConfig:
    G: int = 16
    K: int = 4
    sh_dim: int = 3
    d_g: int = 32
    d_b: int = 128
    d_q: int = 64
    d_cell: int = 32
    d_img: int = 16
    d_pos: int = 16
    hidden: int = 128
    block_hidden: int = 64
    mixer_depth: int = 2
    rvq_depth: int = 4
    rvq_size: int = 1024
    null_branch: bool = False  # separate coarse/fine modules for zero-image decoding

    @property
    def B(self) -> int:
        return self.G // self.K

    @property
    def block_img_dim(self) -> int:
        return 2 * (self.d_img + 1)

    @property
    def coarse_img_dim(self) -> int:
        # per-block features plus the scene-wide mean of the pooled ones
        return self.block_img_dim + self.d_img + 1


@dataclass
class CodeStream:
    G: int
    K: int
    D: int
    N: int
    block_index: np.ndarray  # (M,) strictly increasing linear block indices
    geo: np.ndarray  # (M, D)
    tex: np.ndarray  # (M, D)

    def __post_init__(self):
        self.block_index = np.asarray(self.block_index, dtype=np.int64).reshape(-1)
        M = len(self.block_index)
        self.geo = np.asarray(self.geo, dtype=np.int64).reshape(M, self.D)
        self.tex = np.asarray(self.tex, dtype=np.int64).reshape(M, self.D)

    @property
    def B(self) -> int:
        return self.G // self.K

    @property
    def M(self) -> int:
        return len(self.block_index)

    def validate(self) -> None:
        if self.G % self.K:
            raise CorruptStreamError("G must be a multiple of K")
        if np.any(np.diff(self.block_index) <= 0):
            raise CorruptStreamError("block indices must be strictly increasing")
        if self.M and (self.block_index[0] < 0 or self.block_index[-1] >= self.B**3):
            raise CorruptStreamError("block index out of range")
        for codes in (self.geo, self.tex):
            if np.any(codes < 0) or np.any(codes >= self.N):
                raise CorruptStreamError(f"code outside [0, {self.N})")

    def coords(self) -> np.ndarray:
        B = self.B
        i = self.block_index
        return np.stack([i % B, (i // B) % B, i // (B * B)], axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodeStream):
            return NotImplemented
        return ((self.G, self.K, self.D, self.N) == (other.G, other.K, other.D, other.N)
                and np.array_equal(self.block_index, other.block_index)
                and np.array_equal(self.geo, other.geo) and np.array_equal(self.tex, other.tex))


@dataclass
class SceneLatent:
    coords: np.ndarray  # (M, 3) block coordinates
    latent: torch.Tensor  # (M, d_b) after the block mixer
    geo: torch.Tensor  # (M, d_q) pre-quantisation geometry latent
    tex: torch.Tensor  # (M, d_q)


@dataclass
class Candidates:
    """All K^3 cells of every stored block, in block-major, x-fastest local order."""

    K: int
    G: int
    coords: np.ndarray  # (M, 3)
    table: np.ndarray  # (M, 27) block neighbour rows
    scene: np.ndarray | None = None  # (M,) scene of each block in a merged batch; None = one scene

    @property
    def M(self) -> int:
        return len(self.coords)

    @property
    def P(self) -> int:
        return self.M * self.K**3

    @property
    def local(self) -> np.ndarray:
        return np.tile(np.arange(self.K**3), self.M)

    @property
    def block(self) -> np.ndarray:
        return np.repeat(np.arange(self.M), self.K**3)

    def cells(self) -> np.ndarray:
        K = self.K
        loc = np.arange(K**3)
        off = np.stack([loc % K, (loc // K) % K, loc // (K * K)], axis=1)
        return (self.coords[:, None, :] * K + off[None]).reshape(-1, 3)

    def centers(self) -> np.ndarray:
        return grid_center(self.cells(), self.G)

    def block_centers(self) -> np.ndarray:
        return (self.coords + 0.5) * self.K / self.G

    @classmethod
    def from_coords(cls, coords, K: int, G: int) -> "Candidates":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return cls(K, G, coords, neighbor_table(coords))


class CellDecoder(nn.Module):
    """Block latent -> per-cell grid latent -> geometry and texture attributes.

    Each block vector is broadcast to its K^3 cells and joined with a learned
    per-offset embedding and (optionally) the cell's image features.
    """

    def __init__(self, cfg: CodecConfig, d_img_in: int = 0):
        super().__init__()
        self.cfg = cfg
        self.d_img_in = d_img_in
        self.pos = nn.Embedding(cfg.K**3, cfg.d_pos)
        self.up1 = nn.Linear(cfg.d_b + cfg.d_pos + d_img_in, cfg.hidden)
        self.up2 = nn.Linear(cfg.hidden, cfg.d_cell)
        self.geo1 = nn.Linear(cfg.d_cell, cfg.hidden)
        self.geo2 = nn.Linear(cfg.hidden, 8)
        self.tex1 = nn.Linear(cfg.d_cell, cfg.hidden)
        self.tex2 = nn.Linear(cfg.hidden, cfg.sh_dim)
        nn.init.normal_(self.pos.weight, std=0.5)
        with torch.no_grad():
            self.geo2.weight.mul_(0.1)
            self.geo2.bias.copy_(torch.tensor([1.0, 0, 0, 0, np.log(0.02), np.log(0.02), np.log(0.005), -2.0]))
            self.tex2.weight.mul_(0.1)
            self.tex2.bias.zero_()

    def grid_latent(self, block_lat, cell_img=None, rows=None):
        """Per-cell latents for all K^3 candidates of every block, or only for ``rows``."""
        K3 = self.cfg.K**3
        M = block_lat.shape[0]
        if rows is None:
            parts = [block_lat.repeat_interleave(K3, dim=0), self.pos.weight.repeat(M, 1)]
        else:
            rows = torch.as_tensor(rows, dtype=torch.long)
            parts = [block_lat[rows // K3], self.pos.weight[rows % K3]]
            cell_img = cell_img[rows] if cell_img is not None else None
        if self.d_img_in:
            parts.append(cell_img)
        return self.up2(F.silu(self.up1(torch.cat(parts, dim=1))))

    def attributes(self, grid_lat) -> dict:
        g = self.geo2(F.silu(self.geo1(grid_lat)))
        q = g[:, :4]
        q = q / q.norm(dim=1, keepdim=True).clamp_min(1e-8)
        q = torch.where(q[:, :1] < 0, -q, q)
        return {
            "rot": q,
            "log_scale": g[:, 4:7].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
            "logit": g[:, 7],
            "sh": self.tex2(F.silu(self.tex1(grid_lat))),
        }

    def forward(self, block_lat, cell_img=None, rows=None) -> dict:
        return self.attributes(self.grid_latent(block_lat, cell_img, rows))


class CodecModel(nn.Module):
    def __init__(self, cfg: CodecConfig = CodecConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
            self.f_y = nn.Linear(cfg.sh_dim, cfg.d_g)
            self.f_r = nn.Linear(4, cfg.d_g)
            self.f_s = nn.Linear(3, cfg.d_g)
            self.f_o = nn.Linear(1, cfg.d_g)
            self.grid_proj = nn.Linear(4 * cfg.d_g, cfg.d_g)
            self.reducer = BlockReducer(cfg.d_g, cfg.d_b, cfg.block_hidden, cfg.K)
            self.enc_mixer = SparseMixer(cfg.d_b, cfg.mixer_depth)
            self.geo_head = nn.Linear(cfg.d_b, cfg.d_q)
            self.tex_head = nn.Linear(cfg.d_b, cfg.d_q)
            self.fuse = nn.Linear(2 * cfg.d_q, cfg.d_b)
            self.extractor = FeatureExtractor(cfg.d_img)
            self.scene_dec = CellDecoder(cfg)
            self.coarse_in, self.coarse_mixer, self.coarse_dec, self.fine_dec = self._stage_modules()
            if cfg.null_branch:
                self.null_stages = nn.ModuleDict(dict(zip(
                    ("coarse_in", "coarse_mixer", "coarse", "fine"), self._stage_modules())))
        rng = np.random.default_rng(seed)
        self.rvq_geo = random_codec(rng, cfg.rvq_depth, cfg.rvq_size, cfg.d_q, "geometry")
        self.rvq_tex = random_codec(rng, cfg.rvq_depth, cfg.rvq_size, cfg.d_q, "texture")

    def _stage_modules(self):
        cfg = self.cfg
        coarse_in = nn.Linear(cfg.d_b + cfg.coarse_img_dim, cfg.d_b)
        with torch.no_grad():
            # identity on the latent, zero on image features: conditioning starts as a no-op
            coarse_in.weight.zero_()
            coarse_in.weight[:, : cfg.d_b].copy_(torch.eye(cfg.d_b))
            coarse_in.bias.zero_()
        return coarse_in, SparseMixer(cfg.d_b, cfg.mixer_depth), CellDecoder(cfg), CellDecoder(cfg, cfg.d_img + 1)

    def stage_modules(self, null: bool = False) -> dict:
        """Coarse/fine modules; the zero-image set when ``null`` and the model has one."""
        if null and self.cfg.null_branch:
            return dict(self.null_stages)
        return {"coarse_in": self.coarse_in, "coarse_mixer": self.coarse_mixer,
                "coarse": self.coarse_dec, "fine": self.fine_dec}

    @property
    def dtype(self):
        return self.f_y.weight.dtype

    def decoders(self, null: bool = False) -> dict:
        mods = self.stage_modules(null)
        return {"scene": self.scene_dec, "coarse": mods["coarse"], "fine": mods["fine"]}

    @property
    def codebooks_frozen(self) -> bool:
        return self.rvq_geo.frozen and self.rvq_tex.frozen

    def freeze_codebooks(self) -> None:
        self.rvq_geo = self.rvq_geo.freeze()
        self.rvq_tex = self.rvq_tex.freeze()


# -- encoding ------------------------------------------------------------------

def grid_attribute_tensors(gs: GridScene, dtype=torch.float32) -> dict:
    return {
        "sh": torch.as_tensor(gs.sh, dtype=dtype),
        "rot": torch.as_tensor(gs.rot, dtype=dtype),
        "log_scale": torch.as_tensor(np.log(gs.scale), dtype=dtype),
        "logit": torch.as_tensor(gs.opacity_logit, dtype=dtype),
    }


def encode_cells(attrs: dict, lay: BlockLayout, cand: Candidates, model: CodecModel) -> SceneLatent:
    m = model
    f = m.grid_proj(torch.cat([
        m.f_y(attrs["sh"]), m.f_r(attrs["rot"]), m.f_s(attrs["log_scale"]), m.f_o(attrs["logit"][:, None]),
    ], dim=1))
    K3 = lay.K**3
    flat = torch.as_tensor(lay.cell_block * K3 + lay.cell_local, dtype=torch.long)
    dense = torch.zeros(lay.M * K3, f.shape[1], dtype=f.dtype).index_copy(0, flat, f)
    mask = torch.as_tensor(lay.occupancy())
    fb = m.reducer(dense.reshape(lay.M, K3, -1), mask)
    lat = m.enc_mixer(fb, cand.table)
    return SceneLatent(lay.coords, lat, m.geo_head(lat), m.tex_head(lat))


def encode_scene(gs: GridScene, model: CodecModel) -> SceneLatent:
    if len(gs) == 0:
        raise ValueError("cannot encode an empty grid")
    lay = block_layout(gs, model.cfg.K)
    cand = Candidates.from_coords(lay.coords, lay.K, gs.G)
    return encode_cells(grid_attribute_tensors(gs, model.dtype), lay, cand, model)


def quantize_latent(lat: SceneLatent, model: CodecModel) -> CodeStream:
    cfg = model.cfg
    B = cfg.G // cfg.K
    linear = lat.coords[:, 0] + B * (lat.coords[:, 1] + B * lat.coords[:, 2])
    geo = model.rvq_geo.encode_batch(lat.geo.detach().double().numpy())
    tex = model.rvq_tex.encode_batch(lat.tex.detach().double().numpy())
    return CodeStream(cfg.G, cfg.K, cfg.rvq_depth, cfg.rvq_size, linear, geo, tex)


def quantize_train(z, codec: RvqCodec):
    """Straight-through RVQ of a latent batch.

    Returns (z_st, z_hat, codes, stage_inputs); z_hat carries no gradient.
    """
    X = z.detach().double().numpy()
    codes = codec.encode_batch(X)
    z_hat = torch.as_tensor(codec.decode_batch(codes), dtype=z.dtype)
    return straight_through(z, z_hat), z_hat, codes


def recover_from_parts(geo_hat, tex_hat, model: CodecModel):
    return model.fuse(torch.cat([geo_hat, tex_hat], dim=1))


def recover_latent(codes: CodeStream, model: CodecModel) -> torch.Tensor:
    codes.validate()
    geo = torch.as_tensor(model.rvq_geo.decode_batch(codes.geo), dtype=model.dtype)
    tex = torch.as_tensor(model.rvq_tex.decode_batch(codes.tex), dtype=model.dtype)
    return recover_from_parts(geo, tex, model)


# -- conditioning & decoding -----------------------------------------------------

def scene_context(block_img, d_img: int, scene=None):
    """Mean pooled image feature over each scene's seen blocks, broadcast back to its blocks.

    The last column flags scenes with no seen block (their features stay zero).
    """
    feats, seen = block_img[:, :d_img], 1.0 - block_img[:, d_img:d_img + 1]
    idx = torch.zeros(len(block_img), dtype=torch.long) if scene is None else torch.as_tensor(scene, dtype=torch.long)
    n = int(idx.max()) + 1 if len(idx) else 0
    sums = torch.zeros(n, d_img, dtype=feats.dtype).index_add(0, idx, feats * seen)
    counts = torch.zeros(n, 1, dtype=feats.dtype).index_add(0, idx, seen)
    ctx = torch.cat([sums / counts.clamp_min(1.0), (counts == 0).to(feats.dtype)], dim=1)
    return ctx[idx]


def condition_coarse(scene_lat, block_img, table, model: CodecModel, scene=None, null: bool = False):
    mods = model.stage_modules(null)
    ctx = scene_context(block_img, model.cfg.d_img, scene)
    return mods["coarse_mixer"](mods["coarse_in"](torch.cat([scene_lat, block_img, ctx], dim=1)), table)


def condition_fine(block_lat, cell_img, model: CodecModel, rows=None, null: bool = False):
    return model.stage_modules(null)["fine"].grid_latent(block_lat, cell_img, rows)


def decode_attributes(grid_lat, model: CodecModel, stage: str = "fine", null: bool = False) -> dict:
    return model.decoders(null)[stage].attributes(grid_lat)


@dataclass
class StageOutputs:
    scene: dict
    coarse: dict
    fine: dict

    def __getitem__(self, k: str) -> dict:
        return getattr(self, k)

    def items(self):
        return ((k, getattr(self, k)) for k in STAGES)


def decode_stages(scene_lat, cand: Candidates, cond: Conditioning, model: CodecModel,
                  stages=STAGES, rows=None) -> StageOutputs:
    """Attribute predictions at each requested stage, for every candidate cell or only ``rows``."""
    cell_img, block_img = imgcond.project_conditioning(cond, model.extractor)
    out = {"scene": None, "coarse": None, "fine": None}
    if "scene" in stages:
        out["scene"] = model.scene_dec(scene_lat, rows=rows)
    if "coarse" in stages or "fine" in stages:
        null = cond.is_null
        blat = condition_coarse(scene_lat, block_img, cand.table, model, cand.scene, null)
        if "coarse" in stages:
            out["coarse"] = model.decoders(null)["coarse"](blat, rows=rows)
        if "fine" in stages:
            out["fine"] = decode_attributes(condition_fine(blat, cell_img, model, rows, null), model, "fine", null)
    return StageOutputs(**out)


def to_grid_scene(attrs: dict, cand: Candidates, threshold: float = 0.0) -> GridScene:
    """Keep candidate cells whose decoded opacity logit clears ``threshold``."""
    logit = attrs["logit"].detach().double().numpy()
    keep = logit >= threshold
    cells = cand.cells()[keep]
    rot = quat_normalize_batch(attrs["rot"].detach().double().numpy()[keep]) if keep.any() else np.zeros((0, 4))
    return GridScene(
        G=cand.G,
        cells=cells,
        sh=attrs["sh"].detach().double().numpy()[keep],
        rot=rot,
        scale=np.exp(attrs["log_scale"].detach().double().numpy()[keep]),
        opacity_logit=logit[keep],
    )


@dataclass
class ConditioningViews:
    cameras: list
    images: list  # (H, W, 3) arrays
    features: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one camera per conditioning image")
        if not self.features:
            self.features = [imgcond.fixed_features(im) for im in self.images]


def observe(cand: Candidates, occupied: np.ndarray, opacity: np.ndarray, views: ConditioningViews,
            radius: float | None = None) -> list:
    """Per-view observations of all candidate cells; occluders are the ``occupied`` cells."""
    centers = cand.centers()
    occ_rows = np.nonzero(occupied)[0]
    own = np.full(cand.P, -1)
    own[occ_rows] = np.arange(len(occ_rows))
    radius = radius if radius is not None else 1.0 / cand.G
    return [
        imgcond.observe_view(centers, cand.block, cand.block_centers(), centers[occ_rows], opacity[occ_rows],
                             own, radius, cam, feats)
        for cam, feats in zip(views.cameras, views.features)
    ]


@torch.no_grad()
def decode_codes(codes: CodeStream, model: CodecModel, views: ConditioningViews | None = None,
                 stage: str = "fine") -> tuple[GridScene, StageOutputs]:
    """Decode a stream, optionally conditioned on current images.

    Without views the conditioning stages run on flagged null features. The
    scene-stage occupancy decides which cells serve as occluders and get pooled.
    """
    cfg = model.cfg
    if (codes.G, codes.K, codes.D, codes.N) != (cfg.G, cfg.K, cfg.rvq_depth, cfg.rvq_size):
        raise CorruptStreamError("stream parameters do not match the model")
    cand = Candidates.from_coords(codes.coords(), cfg.K, cfg.G)
    scene_lat = recover_latent(codes, model)
    scene_attrs = model.scene_dec(scene_lat)
    if views is not None and len(views.cameras):
        logit = scene_attrs["logit"].double().numpy()
        occupied = logit >= 0.0
        opacity = 1.0 / (1.0 + np.exp(-logit))
        obs = observe(cand, occupied, opacity, views)
        cond = imgcond.combine_observations(obs, cand.block, occupied, cand.M)
    else:
        cond = Conditioning.null(cand.P, cand.M)
    outs = decode_stages(scene_lat, cand, cond, model, stages=("coarse", "fine"))
    outs.scene = scene_attrs
    return to_grid_scene(outs[stage], cand), outs


@torch.no_grad()
def compress(scene: Scene | GridScene, model: CodecModel) -> CodeStream:
    gs = scene if isinstance(scene, GridScene) else voxelize(scene, model.cfg.G, model.cfg.K)
    return quantize_latent(encode_scene(gs, model), model)


def decompress(codes: CodeStream, model: CodecModel, views: ConditioningViews | None = None,
               stage: str = "fine") -> Scene:
    gs, _ = decode_codes(codes, model, views, stage)
    return gs.to_scene()


def code_bits_per_block(cfg: CodecConfig) -> int:
    return 2 * cfg.rvq_depth * ceil_log2(cfg.rvq_size)
