"""Layer primitives, losses, optimiser, finite-difference checking and checkpoints.

Autodiff is torch's; everything here is a thin, spec-shaped layer over it.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GSQW"


def linear_forward(x, weight, bias=None):
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"inner dims differ: {x.shape[-1]} vs {weight.shape[-1]}")
    y = x @ weight.transpose(-1, -2)
    return y if bias is None else y + bias


class BlockReducer(nn.Module):
    """K^3 cell features -> one block vector via two stride-2 3D convolutions.

    Empty cells are replaced by a learnable pad vector before convolving.
    """

    def __init__(self, d_in: int = 32, d_out: int = 128, hidden: int = 64, K: int = 4):
        super().__init__()
        if K != 4:
            raise ValueError("BlockReducer is built for K=4 (4^3 -> 2^3 -> 1^3)")
        self.K = K
        self.pad = nn.Parameter(torch.zeros(d_in))
        self.conv1 = nn.Conv3d(d_in, hidden, kernel_size=2, stride=2)
        self.conv2 = nn.Conv3d(hidden, d_out, kernel_size=2, stride=2)
        nn.init.normal_(self.pad, std=0.1)

    def forward(self, feats, mask):
        """feats (M, K^3, d_in) in x-fastest local order; mask (M, K^3) bool."""
        M, n, d = feats.shape
        if n != self.K**3:
            raise ValueError(f"expected {self.K ** 3} cells per block, got {n}")
        x = torch.where(mask[..., None], feats, self.pad.expand_as(feats))
        # local index x + K(y + Kz) -> (M, z, y, x, d) -> (M, d, z, y, x)
        x = x.reshape(M, self.K, self.K, self.K, d).permute(0, 4, 1, 2, 3)
        x = self.conv2(F.silu(self.conv1(x)))
        return x.reshape(M, -1)


def conv3_block_reduce(block_feats, mask, reducer: BlockReducer):
    return reducer(block_feats, mask)


_OFFSETS = np.array([(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])


def neighbor_table(coords: np.ndarray) -> np.ndarray:
    """(M, 27) rows of each 3x3x3 neighbour; M marks an absent neighbour."""
    coords = np.asarray(coords, dtype=np.int64)
    lookup = {tuple(c): i for i, c in enumerate(coords)}
    M = len(coords)
    table = np.full((M, 27), M, dtype=np.int64)
    for i, c in enumerate(coords):
        for k, o in enumerate(_OFFSETS):
            table[i, k] = lookup.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]), M)
    return table


class SparseMixer(nn.Module):
    """Residual stack of sparse 3x3x3 convolutions over occupied block positions.

    Stand-in for a block-level 3D U-Net: absent neighbours read a learnable pad
    vector, output positions equal input positions.
    """

    def __init__(self, channels: int, depth: int = 2):
        super().__init__()
        self.depth = depth
        self.pads = nn.ParameterList([nn.Parameter(torch.zeros(channels)) for _ in range(depth)])
        self.convs = nn.ModuleList([nn.Linear(27 * channels, channels) for _ in range(depth)])
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=0.5 / np.sqrt(27 * channels))
            nn.init.zeros_(conv.bias)

    def forward(self, x, table):
        table = torch.as_tensor(table, dtype=torch.long)
        for pad, conv in zip(self.pads, self.convs):
            padded = torch.cat([x, pad[None]], dim=0)
            gathered = padded[table].reshape(x.shape[0], -1)
            x = x + F.silu(conv(gathered))
        return x


def sparse_unet_mix(blocks, coords, mixer: SparseMixer):
    return mixer(blocks, neighbor_table(coords))


@dataclass
class HuberState:
    delta: float = 1.0
    momentum: float = 0.9
    percentile: float = 90.0
    max_seen: float = field(default=0.0, repr=False)

    def update(self, residuals) -> None:
        """Move delta towards the 90th percentile of |residual| (after a training step)."""
        r = np.abs(np.asarray(torch.as_tensor(residuals).detach().cpu(), dtype=np.float64)).ravel()
        if r.size == 0:
            return
        self.max_seen = max(self.max_seen, float(r.max()))
        q = float(np.percentile(r, self.percentile))
        new = self.momentum * self.delta + (1.0 - self.momentum) * q
        if self.max_seen > 0:
            self.delta = min(new, self.max_seen)


def huber(pred, target, state: HuberState | float = 1.0):
    delta = state.delta if isinstance(state, HuberState) else float(state)
    r = (pred - target).abs()
    quad = 0.5 * r * r
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin).mean()


def bce_logits_elem(logit, target):
    """Per-element binary cross-entropy on logits (numerically stable form)."""
    logit = torch.as_tensor(logit)
    target = torch.as_tensor(target, dtype=logit.dtype)
    return logit.clamp(min=0) - logit * target + torch.log1p(torch.exp(-logit.abs()))


def bce_logits(logit, target):
    return bce_logits_elem(logit, target).mean()


class Optimizer:
    """AdamW with global-norm clipping; non-finite gradients skip the step."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.95), weight_decay=0.0, max_norm=1.0, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.max_norm = max_norm
        self.opt = torch.optim.AdamW(self.params, lr=lr, betas=betas, weight_decay=weight_decay, eps=eps, foreach=True)
        self.skipped = 0

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=False)

    def step(self, lr: float | None = None) -> bool:
        grads = [p.grad for p in self.params if p.grad is not None]
        norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])) if grads \
            else torch.zeros(())
        if not torch.isfinite(norm):
            self.skipped += 1
            log.warning("non-finite gradient, step skipped (%d so far)", self.skipped)
            return False
        if self.max_norm is not None and norm > self.max_norm:
            scale = self.max_norm / (float(norm) + 1e-6)
            for g in grads:
                g.mul_(scale)
        if lr is not None:
            for group in self.opt.param_groups:
                group["lr"] = lr
        self.opt.step()
        return True


def optimizer_step(opt: Optimizer, lr: float | None = None) -> bool:
    return opt.step(lr)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    checked: int
    failures: list = field(default_factory=list)


def grad_check(fn, inputs, tol: float = 1e-4, h: float = 1e-3, samples: int = 24, seed: int = 0,
               floor: float = 1e-4) -> GradCheckReport:
    """Central differences against autograd on randomly sampled coordinates.

    ``fn`` maps the input tensors to a tensor; non-scalar outputs are reduced
    with a fixed random projection. The error on a coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    rng = np.random.default_rng(seed)
    inputs = [t.detach().clone().to(torch.float64).requires_grad_(True) for t in inputs]
    with torch.no_grad():
        probe = fn(*inputs)
    proj = torch.as_tensor(rng.normal(size=tuple(probe.shape)), dtype=torch.float64)

    def scalar(*args):
        return (fn(*args) * proj).sum()

    out = scalar(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    worst, checked, failures = 0.0, 0, []
    for k, x in enumerate(inputs):
        flat = x.detach().view(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(samples, n), replace=False)
        for j in picks:
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + h
                fp = scalar(*inputs).item()
                flat[j] = orig - h
                fm = scalar(*inputs).item()
                flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = 0.0 if analytic[k] is None else analytic[k].reshape(-1)[j].item()
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            worst = max(worst, err)
            if err > tol:
                failures.append((k, int(j), ana, num, err))
    return GradCheckReport(not failures, worst, checked, failures)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(named: dict, path=None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(named)))
    for name in sorted(named):
        arr = np.ascontiguousarray(torch.as_tensor(named[name]).detach().cpu().numpy(), dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as f:
            f.write(data)
    return data


def load_checkpoint(src) -> dict:
    data = src if isinstance(src, (bytes, bytearray)) else open(src, "rb").read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a GSQW checkpoint")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        if off + 4 * size > len(data):
            raise ValueError("truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out
