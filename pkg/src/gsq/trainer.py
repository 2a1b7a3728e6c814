"""Losses, schedule, codebook learning and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import imgcond
from .codec import (
    Candidates, CodecConfig, CodecModel, ConditioningViews, StageOutputs, decode_codes, decode_stages,
    encode_cells, grid_attribute_tensors, observe, quantize_latent, quantize_train, recover_from_parts,
    to_grid_scene,
)
from .config import load_config, save_config
from .container import CodebookPack
from .gauss import Scene
from .grid import BlockLayout, GridScene, block_layout, voxelize
from .imgcond import Conditioning
from .metrics import psnr, ssim
from .nn import HuberState, Optimizer, bce_logits_elem, huber, load_checkpoint, save_checkpoint
from .render import RenderConfig, render
from .rvq import Codebook, RvqCodec, commitment_loss, ema_update, kmeans, nearest_batch
from .scenelab import CameraSpec, SceneRecord, build_dataset, rig_specs

log = logging.getLogger(__name__)

COND_VIEWS = 6
EVAL_VIEWS = 4


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup: int = 10
    freeze_start: int = 91
    lr_peak: float = 1e-4
    lr_final: float = 1e-5
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0
    batch_size: int = 8
    wG_start: float = 0.1
    wG_end: float = 0.0
    wvq_start: float = 0.01
    wvq_end: float = 0.1
    w_tex: float = 1.0
    kmeans_period: int = 2
    kmeans_iters: int = 20
    reservoir: int = 4096
    ema_decay: float = 0.99
    max_norm: float = 1.0
    lam: float = 0.2
    p_null: float = 0.2
    paired_null: bool = False  # also decode every sample with zero images (p_null then unused)
    max_images: int = COND_VIEWS
    neg_ratio: float = 0.0  # empty candidates sampled per occupied cell in the geometry pass; 0 = all
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup < self.freeze_start - 1 <= self.epochs:
            raise ValueError("need 0 <= warmup < last decay epoch < freeze_start <= epochs + 1")
        if self.batch_size < 1 or self.kmeans_period < 1:
            raise ValueError("batch_size and kmeans_period must be positive")
        if not 1 <= self.max_images <= COND_VIEWS:
            raise ValueError(f"max_images must lie in [1, {COND_VIEWS}]")

    @property
    def decay_span(self) -> tuple[int, int]:
        return self.warmup + 1, self.freeze_start - 1


def desk_config(**overrides) -> TrainConfig:
    """Short schedule with the same shape as the default one, sized for a single CPU core."""
    base = dict(epochs=40, warmup=4, freeze_start=37, lr_peak=2e-3, lr_final=1e-4, batch_size=4,
                wG_end=0.05, kmeans_iters=15, neg_ratio=3.0, paired_null=True)
    base.update(overrides)
    return TrainConfig(**base)


def rescale_schedule(cfg: TrainConfig, epochs: int) -> TrainConfig:
    """Same schedule shape over a different number of epochs (warmup and frozen tail scale along)."""
    warm = max(1, round(cfg.warmup * epochs / cfg.epochs))
    tail = max(1, round((cfg.epochs - cfg.freeze_start + 1) * epochs / cfg.epochs))
    return replace(cfg, epochs=epochs, warmup=warm, freeze_start=epochs - tail + 1)


# -- schedule --------------------------------------------------------------------

class Schedule(NamedTuple):
    lr: float
    w_G: float
    w_vq: float
    vq_enabled: bool
    codebooks_frozen: bool


def schedule_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> Schedule:
    """Linear warmup, cosine decay with linear weight ramps, then a frozen tail."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    a, b = cfg.decay_span
    if epoch <= cfg.warmup:
        return Schedule(cfg.lr_peak * epoch / cfg.warmup, cfg.wG_start, 0.0, False, False)
    if epoch <= b:
        p = (epoch - a) / (b - a) if b > a else 1.0
        lr = cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1 + math.cos(math.pi * p))
        return Schedule(lr, cfg.wG_start + (cfg.wG_end - cfg.wG_start) * p,
                        cfg.wvq_start + (cfg.wvq_end - cfg.wvq_start) * p, True, False)
    return Schedule(cfg.lr_final, cfg.wG_end, cfg.wvq_end, True, True)


def is_refresh_epoch(epoch: int, cfg: TrainConfig) -> bool:
    a, b = cfg.decay_span
    return a <= epoch <= b and (epoch - a) % cfg.kmeans_period == 0


# -- losses ----------------------------------------------------------------------

@dataclass
class AttributeTargets:
    """Supervision for the candidate cells of one scene (rows = occupied candidates)."""

    rows: torch.Tensor
    rot: torch.Tensor
    log_scale: torch.Tensor
    sh: torch.Tensor
    opacity: torch.Tensor  # (P,) target opacity, 0 at empty candidates
    weight: torch.Tensor | None = None  # per-row opacity weights after subsampling

    @classmethod
    def from_grid(cls, gs: GridScene, rows: np.ndarray, P: int, dtype=torch.float32) -> "AttributeTargets":
        t = grid_attribute_tensors(gs, dtype)
        opacity = torch.zeros(P, dtype=dtype)
        r = torch.as_tensor(rows, dtype=torch.long)
        opacity[r] = torch.sigmoid(t["logit"])
        return cls(r, t["rot"], t["log_scale"], t["sh"], opacity)

    @classmethod
    def from_attributes(cls, attrs: dict, rows) -> "AttributeTargets":
        """Targets equal to a prediction (handy for fixed-point checks)."""
        r = torch.as_tensor(rows, dtype=torch.long)
        occ = torch.zeros(len(attrs["logit"]), dtype=attrs["logit"].dtype)
        occ[r] = torch.sigmoid(attrs["logit"][r])
        return cls(r, attrs["rot"][r], attrs["log_scale"][r], attrs["sh"][r], occ)

    def restrict(self, sel: torch.Tensor, weight: torch.Tensor | None = None) -> "AttributeTargets":
        """Targets for a prediction made only at the sorted candidate rows ``sel`` (a superset of rows)."""
        pos = torch.searchsorted(sel, self.rows)
        return AttributeTargets(pos, self.rot, self.log_scale, self.sh, self.opacity[sel], weight)


def sample_rows(occupied: np.ndarray, neg_ratio: float, rng: np.random.Generator):
    """Occupied rows plus a uniform sample of empty ones.

    Returns sorted rows and per-row weights that make the weighted opacity sum an
    unbiased estimate of the sum over all candidates. ``neg_ratio <= 0`` keeps every row.
    """
    P = len(occupied)
    empty = np.flatnonzero(~occupied)
    n_neg = len(empty) if neg_ratio <= 0 else min(len(empty), max(1, int(neg_ratio * occupied.sum())))
    if n_neg == len(empty):
        return torch.arange(P), None
    pick = rng.choice(empty, size=n_neg, replace=False)
    sel = np.sort(np.concatenate([np.flatnonzero(occupied), pick]))
    w = np.where(occupied[sel], 1.0, len(empty) / n_neg)
    return torch.as_tensor(sel, dtype=torch.long), torch.as_tensor(w, dtype=torch.float32)


def canonical_sign(q_pred, q_target):
    """Flip predicted quaternions into the target's hemisphere."""
    s = torch.where((q_pred * q_target).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(q_pred.dtype)
    return q_pred * s


def _binary_entropy(p):
    p = p.clamp(0.0, 1.0)
    ent = torch.zeros_like(p)
    m = (p > 0) & (p < 1)
    ent[m] = -(p[m] * torch.log(p[m]) + (1 - p[m]) * torch.log1p(-p[m]))
    return ent


def _weighted_mean(x, w):
    return x.mean() if w is None else (w * x).sum() / w.sum()


def attribute_terms(pred: dict, tgt: AttributeTargets, states: dict | None = None) -> dict:
    """Per-term attribute losses of one stage: rot, scale, opacity and sh."""
    st = states or {}
    r = tgt.rows
    ls = pred["log_scale"][r]
    return {
        "rot": huber(canonical_sign(pred["rot"][r], tgt.rot), tgt.rot, st.get("rot", 1.0)),
        "scale": huber(ls, tgt.log_scale, st.get("log_scale", 1.0))
        + huber(torch.exp(ls), torch.exp(tgt.log_scale), st.get("lin_scale", 1.0)),
        # BCE minus the target's entropy: same gradient, exactly zero at the optimum
        "opacity": _weighted_mean(bce_logits_elem(pred["logit"], tgt.opacity) - _binary_entropy(tgt.opacity),
                                  tgt.weight),
        "sh": huber(pred["sh"][r], tgt.sh, st.get("sh", 1.0)),
    }


def attribute_loss(pred: dict, tgt: AttributeTargets, states: dict | None = None, w_tex: float = 1.0):
    """L_q + L_s + L_sigma (+ w_tex * SH Huber) for one decoding stage."""
    t = attribute_terms(pred, tgt, states)
    return t["rot"] + t["scale"] + t["opacity"] + w_tex * t["sh"]


def total_attribute_loss(stages: StageOutputs, archived: AttributeTargets, changed: AttributeTargets,
                         states: dict | None = None, w_tex: float = 1.0):
    """Scene stage against the archive, fusion stages against the changed scene; plain sum."""
    states = states or {}
    total = 0.0
    for name, pred in stages.items():
        if pred is None:
            continue
        tgt = archived if name == "scene" else changed
        total = total + attribute_loss(pred, tgt, states.get(name), w_tex)
    return total


class ImageMetric(NamedTuple):
    value: float  # L_I
    ssim: float
    psnr: float
    l1: float
    l2: float


def image_metric(pred, targets, cams=None, lam: float = 0.2, cfg: RenderConfig = RenderConfig()) -> ImageMetric:
    """lam * (1 - SSIM)/2 + (1 - lam)/2 * (L1 + L2), averaged over views; no gradient."""
    if isinstance(pred, Scene):
        pred = [render(pred, c, cfg) for c in cams]
    if isinstance(targets, Scene):
        targets = [render(targets, c, cfg) for c in cams]
    l1 = float(np.mean([np.abs(p - t).mean() for p, t in zip(pred, targets)]))
    l2 = float(np.mean([((p - t) ** 2).mean() for p, t in zip(pred, targets)]))
    s = float(np.mean([ssim(p, t) for p, t in zip(pred, targets)]))
    ps = float(np.mean([psnr(p, t) for p, t in zip(pred, targets)]))
    return ImageMetric(lam * (1 - s) / 2 + (1 - lam) / 2 * (l1 + l2), s, ps, l1, l2)


def total_loss(attr_loss, vq_loss, sched: Schedule):
    return sched.w_G * attr_loss + sched.w_vq * vq_loss


def grid_regularizers(scene) -> torch.Tensor:
    """mean(s) - mean|logit|: small Gaussians, decisive opacities."""
    s = torch.as_tensor(scene.scale) if not isinstance(scene, dict) else scene["scale"]
    o = torch.as_tensor(scene.opacity_logit) if not isinstance(scene, dict) else scene["logit"]
    return s.mean() - o.abs().mean()


# -- codebooks -------------------------------------------------------------------

def stage_residuals(codec: RvqCodec, X: np.ndarray, codes: np.ndarray) -> list[np.ndarray]:
    """Inputs seen by every stage for the given codes."""
    r = np.asarray(X, dtype=np.float64).copy()
    out = []
    for d, cb in enumerate(codec.codebooks):
        out.append(r.copy())
        r -= cb.entries[codes[:, d]]
    return out


def ema_step(codec: RvqCodec, X: np.ndarray, codes: np.ndarray, decay: float) -> RvqCodec:
    if codec.frozen or len(X) == 0:
        return codec
    res = stage_residuals(codec, X, codes)
    return RvqCodec([ema_update(cb, r, codes[:, d], decay) for d, (cb, r) in enumerate(zip(codec.codebooks, res))])


def refit_codec(codec: RvqCodec, X: np.ndarray, iters: int, seed: int, steady_batch: float,
                decay: float) -> RvqCodec:
    """Stage-by-stage k-means on residuals; EMA state restarts at its steady-state scale."""
    r = np.asarray(X, dtype=np.float64).copy()
    books = []
    for d, cb in enumerate(codec.codebooks):
        C, _, _ = kmeans(r, cb.size, iters, seed + d, n_init=1, refine=False)
        assign = nearest_batch(r, C)
        n = np.bincount(assign, minlength=cb.size).astype(np.float64)
        counts = np.maximum(n * steady_batch / len(r) / (1 - decay), 1e-3)
        books.append(Codebook(C, cb.id, False, counts, C * counts[:, None]))
        r -= C[assign]
    return RvqCodec(books)


def codebook_refresh(model: CodecModel, latents: dict, epoch: int, cfg: TrainConfig,
                     steady_batch: float = 32.0) -> CodecModel:
    """Overwrite both codecs with k-means fits to buffered pre-quantisation latents."""
    if model.codebooks_frozen or schedule_at(epoch, cfg).codebooks_frozen:
        return model
    for head in ("geo", "tex"):
        X = latents.get(head)
        if X is None or len(X) == 0:
            continue
        attr = f"rvq_{head}"
        seed = cfg.seed * 1000 + epoch * 10 + (head == "tex")
        setattr(model, attr, refit_codec(getattr(model, attr), X, cfg.kmeans_iters, seed, steady_batch,
                                         cfg.ema_decay))
    return model


class Reservoir:
    """Uniform reservoir sample of latent rows."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity, self.rng = capacity, rng
        self.rows: list[np.ndarray] = []
        self.seen = 0

    def add(self, X: np.ndarray) -> None:
        for x in np.asarray(X, dtype=np.float64):
            if len(self.rows) < self.capacity:
                self.rows.append(x)
            else:
                j = int(self.rng.integers(self.seen + 1))
                if j < self.capacity:
                    self.rows[j] = x
            self.seen += 1

    def array(self) -> np.ndarray:
        return np.stack(self.rows) if self.rows else np.zeros((0, 0))

    def clear(self) -> None:
        self.rows, self.seen = [], 0


def utilization(codes: list[np.ndarray], N: int) -> float:
    """Fraction of entries used, averaged over stages."""
    if not codes:
        return 0.0
    C = np.concatenate(codes)
    return float(np.mean([len(np.unique(C[:, d])) / N for d in range(C.shape[1])]))


# -- data ------------------------------------------------------------------------

def _azimuth_offset(seed: int, stream: int) -> float:
    return float(np.random.default_rng([seed, stream]).uniform(0, 360))


def conditioning_specs(seed: int, n: int = COND_VIEWS, size: int = 64) -> list[CameraSpec]:
    return rig_specs(n, width=size, height=size, azimuth_offset_deg=_azimuth_offset(seed, 1))


def eval_specs(seed: int, n: int = EVAL_VIEWS, size: int = 64) -> list[CameraSpec]:
    """Novel views: other azimuths and a higher elevation than the conditioning rig."""
    return rig_specs(n, width=size, height=size, elevation_deg=30.0, azimuth_offset_deg=_azimuth_offset(seed, 2))


def conditioning_cameras(seed: int, n: int = COND_VIEWS, size: int = 64):
    return [s.camera() for s in conditioning_specs(seed, n, size)]


def eval_cameras(seed: int, n: int = EVAL_VIEWS, size: int = 64):
    return [s.camera() for s in eval_specs(seed, n, size)]


@dataclass
class ScenePrep:
    """Everything a training step or an evaluation needs for one scene."""

    record: SceneRecord
    grid: GridScene
    lay: BlockLayout
    cand: Candidates
    attrs: dict
    archived: AttributeTargets
    changed: AttributeTargets
    occupied: np.ndarray  # (P,) bool
    cond_cams: list
    cond_images: list
    observations: list  # ViewObservation per conditioning view (true occupancy)

    def conditioning(self, views) -> Conditioning:
        return imgcond.combine_observations([self.observations[v] for v in views], self.cand.block,
                                            self.occupied, self.cand.M)

    def views(self, idx) -> ConditioningViews:
        return ConditioningViews([self.cond_cams[i] for i in idx], [self.cond_images[i] for i in idx])


def prepare_scene(record: SceneRecord, mcfg: CodecConfig, render_cfg: RenderConfig = RenderConfig()) -> ScenePrep:
    gs = voxelize(record.archived, mcfg.G, mcfg.K)
    gs_changed = voxelize(record.changed, mcfg.G, mcfg.K)
    if not np.array_equal(gs.cells, gs_changed.cells):
        raise AssertionError("appearance change altered the voxel layout")
    lay = block_layout(gs, mcfg.K)
    cand = Candidates.from_coords(lay.coords, mcfg.K, mcfg.G)
    rows = lay.cell_block * mcfg.K**3 + lay.cell_local
    occupied = np.zeros(cand.P, dtype=bool)
    occupied[rows] = True
    cams = conditioning_cameras(record.seed)
    images = [render(record.changed, c, render_cfg) for c in cams]
    opacity = np.zeros(cand.P)
    opacity[rows] = 1.0 / (1.0 + np.exp(-gs.opacity_logit))
    views = ConditioningViews(cams, images)
    obs = observe(cand, occupied, opacity, views)
    return ScenePrep(record, gs, lay, cand, grid_attribute_tensors(gs),
                     AttributeTargets.from_grid(gs, rows, cand.P), AttributeTargets.from_grid(gs_changed, rows, cand.P),
                     occupied, cams, images, obs)


# -- one step --------------------------------------------------------------------

@dataclass
class Batch:
    """Several scenes laid side by side as one disjoint block set."""

    attrs: dict
    lay: BlockLayout
    cand: Candidates
    archived: AttributeTargets
    changed: AttributeTargets
    scene_ids: list

    @property
    def occupied(self) -> np.ndarray:
        occ = np.zeros(self.cand.P, dtype=bool)
        occ[self.archived.rows.numpy()] = True
        return occ


def _cat_targets(ts: list[AttributeTargets], offsets) -> AttributeTargets:
    return AttributeTargets(torch.cat([t.rows + o for t, o in zip(ts, offsets)]),
                            torch.cat([t.rot for t in ts]), torch.cat([t.log_scale for t in ts]),
                            torch.cat([t.sh for t in ts]), torch.cat([t.opacity for t in ts]))


def merge_batch(preps: list[ScenePrep], conds: list[Conditioning]) -> tuple[Batch, Conditioning]:
    if len(preps) == 1:
        p = preps[0]
        return Batch(p.attrs, p.lay, p.cand, p.archived, p.changed, [p.record.scene_id]), conds[0]
    K = preps[0].cand.K
    Ms = [p.cand.M for p in preps]
    m_off = np.concatenate([[0], np.cumsum(Ms)[:-1]])
    M = int(sum(Ms))
    tables = []
    for p, o in zip(preps, m_off):
        t = p.cand.table
        tables.append(np.where(t == p.cand.M, M, t + o))
    lay = BlockLayout(K, preps[0].lay.B, np.concatenate([p.lay.coords for p in preps]),
                      np.concatenate([p.lay.linear for p in preps]),
                      np.concatenate([p.lay.cell_block + o for p, o in zip(preps, m_off)]),
                      np.concatenate([p.lay.cell_local for p in preps]))
    cand = Candidates(K, preps[0].cand.G, lay.coords, np.concatenate(tables), np.repeat(np.arange(len(preps)), Ms))
    p_off = [int(o) * K**3 for o in m_off]
    attrs = {k: torch.cat([p.attrs[k] for p in preps]) for k in preps[0].attrs}
    cond = Conditioning(np.concatenate([c.cell for c in conds]), np.concatenate([c.block_pool for c in conds]),
                        np.concatenate([c.block_coarse for c in conds]))
    batch = Batch(attrs, lay, cand, _cat_targets([p.archived for p in preps], p_off),
                  _cat_targets([p.changed for p in preps], p_off), [p.record.scene_id for p in preps])
    return batch, cond


@dataclass
class StepResult:
    loss: torch.Tensor
    attr: torch.Tensor
    vq: torch.Tensor
    per_stage: dict
    geo_q: torch.Tensor  # geometry quantiser output (straight-through)
    latents: dict
    codes: dict
    preds: StageOutputs


def step_losses(model: CodecModel, prep: ScenePrep, cond: Conditioning, sched: Schedule,
                states: dict | None = None, w_tex: float = 1.0, neg_ratio: float = 0.0,
                rng: np.random.Generator | None = None, null_cond: Conditioning | None = None) -> StepResult:
    """Forward pass and losses for one scene.

    Geometry objectives see the straight-through geometry quantiser output; the
    texture objective runs a second decoder pass with that output detached, so no
    non-geometry gradient reaches the geometry quantiser. With ``neg_ratio > 0`` the
    geometry pass decodes the occupied cells plus a reweighted sample of empty ones.
    ``preds`` holds per-stage predictions at the occupied cells only. With ``null_cond``
    the coarse and fine stages are decoded a second time under it and their losses added
    (reported as ``per_stage["null"]``).
    """
    states = states or {}
    lat = encode_cells(prep.attrs, prep.lay, prep.cand, model)
    codes = {}
    if sched.vq_enabled:
        geo_q, geo_hat, codes["geo"] = quantize_train(lat.geo, model.rvq_geo)
        tex_q, tex_hat, codes["tex"] = quantize_train(lat.tex, model.rvq_tex)
        vq = commitment_loss(lat.geo, geo_hat) + commitment_loss(lat.tex, tex_hat)
    else:
        geo_q, tex_q = lat.geo, lat.tex
        vq = torch.zeros((), dtype=lat.geo.dtype)
    if geo_q.requires_grad:
        geo_q.retain_grad()
    sel, weight = sample_rows(prep.occupied, neg_ratio, rng or np.random.default_rng())
    z_geo = recover_from_parts(geo_q, tex_q, model)
    z_tex = recover_from_parts(geo_q.detach(), tex_q, model)
    geo_rows = None if weight is None else sel
    geo_pass = decode_stages(z_geo, prep.cand, cond, model, rows=geo_rows)
    # SH is supervised on occupied cells only, so the second pass decodes just those rows
    rows = prep.archived.rows
    tex_pass = decode_stages(z_tex, prep.cand, cond, model, rows=rows)

    def stage_loss(name, gp, tp):
        full = prep.archived if name == "scene" else prep.changed
        tgt = full if weight is None else full.restrict(sel, weight)
        g = attribute_terms(gp[name], tgt, states.get(name))
        sh = huber(tp[name]["sh"], tgt.sh, (states.get(name) or {}).get("sh", 1.0))
        return g["rot"] + g["scale"] + g["opacity"] + w_tex * sh, tgt

    attr, per_stage, preds = 0.0, {}, {}
    for name in ("scene", "coarse", "fine"):
        stage, tgt = stage_loss(name, geo_pass, tex_pass)
        per_stage[name] = stage
        attr = attr + stage
        preds[name] = {"rot": geo_pass[name]["rot"][tgt.rows].detach(),
                       "log_scale": geo_pass[name]["log_scale"][tgt.rows].detach(),
                       "sh": tex_pass[name]["sh"].detach()}
    if null_cond is not None:
        fused = ("coarse", "fine")
        gn = decode_stages(z_geo, prep.cand, null_cond, model, stages=fused, rows=geo_rows)
        tn = decode_stages(z_tex, prep.cand, null_cond, model, stages=fused, rows=rows)
        per_stage["null"] = sum(stage_loss(name, gn, tn)[0] for name in fused)
        attr = attr + per_stage["null"]
    return StepResult(total_loss(attr, vq, sched), attr, vq, per_stage, geo_q,
                      {"geo": lat.geo.detach().double().numpy(), "tex": lat.tex.detach().double().numpy()},
                      codes, StageOutputs(**preds))


def update_huber_states(states: dict, preds: StageOutputs, prep: ScenePrep) -> None:
    """Feed occupied-cell residuals (as returned by ``step_losses``) to the adaptive Huber thresholds."""
    for name, pred in preds.items():
        tgt = prep.archived if name == "scene" else prep.changed
        st = states.setdefault(name, {k: HuberState() for k in ("rot", "log_scale", "lin_scale", "sh")})
        with torch.no_grad():
            st["rot"].update(canonical_sign(pred["rot"], tgt.rot) - tgt.rot)
            st["log_scale"].update(pred["log_scale"] - tgt.log_scale)
            st["lin_scale"].update(torch.exp(pred["log_scale"]) - torch.exp(tgt.log_scale))
            st["sh"].update(pred["sh"] - tgt.sh)


# -- evaluation ------------------------------------------------------------------

def eval_truth(prep: ScenePrep, cams, render_cfg: RenderConfig = RenderConfig()) -> list:
    return [render(prep.record.changed, c, render_cfg) for c in cams]


def evaluate_modes(model: CodecModel, preps: list[ScenePrep], view_counts=(6,), eval_views: int = EVAL_VIEWS,
                   render_cfg: RenderConfig = RenderConfig()) -> dict:
    """Mean PSNR per decoding mode on the changed scenes.

    Modes: "archive" (scene stage, no images), "none" (fine stage, zero images),
    and for each n in ``view_counts``: "coarse@n" and "fine@n".
    """
    acc: dict = {}
    for prep in preps:
        cams = eval_cameras(prep.record.seed, eval_views)
        truth = eval_truth(prep, cams, render_cfg)
        codes = quantize_latent(encode_cells(prep.attrs, prep.lay, prep.cand, model), model)

        def score(gs):
            sc = gs.to_scene()
            return float(np.mean([psnr(render(sc, c, render_cfg), t) for c, t in zip(cams, truth)]))

        gs, outs = decode_codes(codes, model, None, "fine")
        acc.setdefault("archive", []).append(score(to_grid_scene(outs.scene, prep.cand)))
        acc.setdefault("none", []).append(score(gs))
        for n in view_counts:
            gs_c, _ = decode_codes(codes, model, prep.views(range(n)), "coarse")
            gs_f, _ = decode_codes(codes, model, prep.views(range(n)), "fine")
            acc.setdefault(f"coarse@{n}", []).append(score(gs_c))
            acc.setdefault(f"fine@{n}", []).append(score(gs_f))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# -- the loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CodecModel
    pack: CodebookPack
    log: list = field(default_factory=list)


LOG_FIELDS = ["epoch", "lr", "w_G", "w_vq", "loss_total", "loss_scene", "loss_coarse", "loss_fine", "loss_vq",
              "val_L_I", "val_psnr", "val_ssim", "util_geo", "util_tex", "skipped"]


def _validate(model, prep: ScenePrep, lam: float) -> ImageMetric:
    cams = eval_cameras(prep.record.seed, 2)
    codes = quantize_latent(encode_cells(prep.attrs, prep.lay, prep.cand, model), model)
    gs, _ = decode_codes(codes, model, prep.views(range(COND_VIEWS)), "fine")
    return image_metric(gs.to_scene(), eval_truth(prep, cams), cams, lam)


def train_loop(train: list[ScenePrep], cfg: TrainConfig, mcfg: CodecConfig = CodecConfig(),
               val: ScenePrep | None = None, model: CodecModel | None = None, out_dir=None,
               max_steps: int | None = None, on_step=None) -> TrainResult:
    """Deterministic training over prepared scenes; returns the model with frozen codebooks."""
    if not train:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else CodecModel(mcfg, seed=cfg.seed)
    if model.cfg.null_branch and not cfg.paired_null and 0.0 < cfg.p_null < 1.0:
        # a merged batch mixing null and conditioned scenes would send them all to the conditioned modules
        raise ValueError("a model with a zero-image branch needs paired_null or p_null in {0, 1}")
    opt = Optimizer(model.parameters(), lr=0.0, betas=cfg.betas, weight_decay=cfg.weight_decay,
                    max_norm=cfg.max_norm)
    states: dict = {}
    pools = {h: Reservoir(cfg.reservoir, np.random.default_rng([cfg.seed, i])) for i, h in enumerate(("geo", "tex"))}
    steady = float(np.mean([p.cand.M for p in train])) * cfg.batch_size
    rows, steps = [], 0
    val = val if val is not None else train[0]
    for epoch in range(1, cfg.epochs + 1):
        sched = schedule_at(epoch, cfg)
        if is_refresh_epoch(epoch, cfg):
            codebook_refresh(model, {h: p.array() for h, p in pools.items()}, epoch, cfg, steady)
            for p in pools.values():
                p.clear()
        if sched.codebooks_frozen and not model.codebooks_frozen:
            model.freeze_codebooks()
        sums = {k: 0.0 for k in ("total", "scene", "coarse", "fine", "vq")}
        used = {"geo": [], "tex": []}
        order = rng.permutation(len(train))
        n_items = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            conds = []
            for i in batch:
                null = not cfg.paired_null and rng.random() < cfg.p_null
                n_img = 0 if null else int(rng.integers(1, cfg.max_images + 1))
                views = sorted(rng.choice(COND_VIEWS, size=n_img, replace=False).tolist())
                conds.append(train[i].conditioning(views))
            data, cond = merge_batch([train[i] for i in batch], conds)
            null_cond = Conditioning.null(data.cand.P, data.cand.M) if cfg.paired_null else None
            res = step_losses(model, data, cond, sched, states, cfg.w_tex, cfg.neg_ratio, rng, null_cond)
            if not torch.isfinite(res.loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, scenes {data.scene_ids}: "
                                     f"attr={float(res.attr)} vq={float(res.vq)}")
            res.loss.backward()
            opt.step(sched.lr)
            steps += 1
            update_huber_states(states, res.preds, data)
            for h in ("geo", "tex"):
                pools[h].add(res.latents[h])
                if sched.vq_enabled:
                    used[h].append(res.codes[h])
            if sched.vq_enabled and not model.codebooks_frozen:
                model.rvq_geo = ema_step(model.rvq_geo, res.latents["geo"], res.codes["geo"], cfg.ema_decay)
                model.rvq_tex = ema_step(model.rvq_tex, res.latents["tex"], res.codes["tex"], cfg.ema_decay)
            sums["total"] += float(res.loss.detach())
            sums["vq"] += float(res.vq.detach())
            for k in ("scene", "coarse", "fine"):
                sums[k] += float(res.per_stage[k].detach())
            n_items += 1
            if on_step is not None:
                on_step(steps, epoch, res)
            if max_steps is not None and steps >= max_steps:
                break
        with torch.no_grad():
            vm = _validate(model, val, cfg.lam)
        row = {"epoch": epoch, "lr": sched.lr, "w_G": sched.w_G, "w_vq": sched.w_vq,
               **{f"loss_{k}": v / max(n_items, 1) for k, v in sums.items()},
               "val_L_I": vm.value, "val_psnr": vm.psnr, "val_ssim": vm.ssim,
               "util_geo": utilization(used["geo"], model.cfg.rvq_size), "util_tex": utilization(used["tex"], model.cfg.rvq_size),
               "skipped": opt.skipped}
        rows.append(row)
        log.info("epoch %d lr %.2e attr(scene/coarse/fine) %.4f/%.4f/%.4f vq %.4f val psnr %.2f util %.2f/%.2f",
                 epoch, sched.lr, row["loss_scene"], row["loss_coarse"], row["loss_fine"], row["loss_vq"],
                 vm.psnr, row["util_geo"], row["util_tex"])
        if max_steps is not None and steps >= max_steps:
            break
    if not model.codebooks_frozen:
        model.freeze_codebooks()
    result = TrainResult(model, CodebookPack(model.rvq_geo, model.rvq_tex), rows)
    if out_dir is not None:
        save_model(model, out_dir, cfg)
        write_log(Path(out_dir) / "train_log.csv", rows)
    return result


def desk_model_config(**overrides) -> CodecConfig:
    """Desk model: default dimensions, 256-entry codebooks and a separate zero-image branch."""
    return CodecConfig(**{"rvq_size": 256, "null_branch": True, **overrides})


@dataclass
class DeskRun:
    result: TrainResult
    train: list[ScenePrep]
    test: list[ScenePrep]

    @property
    def model(self) -> CodecModel:
        return self.result.model


def desk_experiment(n_train: int = 64, n_test: int = 16, data_seed: int = 0, cfg: TrainConfig | None = None,
                    mcfg: CodecConfig | None = None, out_dir=None) -> DeskRun:
    """Generate a procedural dataset, prepare it and train on it with the desk schedule."""
    cfg = cfg if cfg is not None else desk_config()
    mcfg = mcfg if mcfg is not None else desk_model_config()
    ds = build_dataset(n_train, n_test, seed=data_seed)
    train = [prepare_scene(r, mcfg) for r in ds.train]
    test = [prepare_scene(r, mcfg) for r in ds.test]
    res = train_loop(train, cfg, mcfg, val=test[0], out_dir=out_dir)
    return DeskRun(res, train, test)


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


# -- model directories -------------------------------------------------------------

def save_model(model: CodecModel, out_dir, cfg: TrainConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.state_dict(), out / "checkpoint.gsqw")
    CodebookPack(model.rvq_geo.freeze(), model.rvq_tex.freeze()).save(out / "codebooks.gsc")
    save_config(out / "model.cfg", model.cfg)
    if cfg is not None:
        save_config(out / "train.cfg", cfg)


def load_model(model_dir) -> CodecModel:
    d = Path(model_dir)
    mcfg = load_config(d / "model.cfg", CodecConfig)
    model = CodecModel(mcfg)
    state = load_checkpoint(d / "checkpoint.gsqw")
    model.load_state_dict(state)
    pack = CodebookPack.load(d / "codebooks.gsc")
    model.rvq_geo, model.rvq_tex = pack.geo, pack.tex
    model.eval()
    return model
