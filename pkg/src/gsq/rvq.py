"""Vector quantisation, residual VQ, and codebook learning (k-means + EMA)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .grid import ceil_log2


class FrozenCodebookError(RuntimeError):
    pass


class CorruptStreamError(ValueError):
    pass


@dataclass
class Codebook:
    entries: np.ndarray  # (N, d_e)
    id: str = ""
    frozen: bool = False
    ema_counts: np.ndarray | None = field(default=None, repr=False)
    ema_sums: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.entries = np.array(self.entries, dtype=np.float64, ndmin=2)
        if len(self.entries) < 1:
            raise ValueError("codebook needs at least one entry")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if self.ema_counts is None:
            self.ema_counts = np.ones(len(self.entries))
            self.ema_sums = self.entries.copy()

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def freeze(self) -> "Codebook":
        """Frozen copy with entries rounded to float32 (the on-disk precision)."""
        e = self.entries.astype(np.float32).astype(np.float64)
        return Codebook(e, self.id, True, np.ones(len(e)), e.copy())


def nearest_batch(X: np.ndarray, entries: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of the nearest entry for every row of X (squared L2, lowest index on ties).

    Distances come from the expanded form; any row whose best candidates lie within
    rounding error of each other is re-decided with exact differences.
    """
    X = np.asarray(X, dtype=np.float64)
    E = np.asarray(entries, dtype=np.float64)
    out = np.empty(len(X), dtype=np.int64)
    e2 = (E**2).sum(1)
    for s in range(0, len(X), chunk):
        x = X[s:s + chunk]
        x2 = (x**2).sum(1)
        d = x2[:, None] - 2.0 * (x @ E.T) + e2[None, :]
        best = d.min(1)
        tol = 1e-9 * (x2[:, None] + e2[None, :]).max(1) + 1e-12
        near = d <= (best + 2 * tol)[:, None]
        idx = np.argmax(near, axis=1)  # lowest index among the near-minimal set
        for i in np.nonzero(near.sum(1) > 1)[0]:
            cand = np.nonzero(near[i])[0]
            exact = ((x[i] - E[cand]) ** 2).sum(1)
            idx[i] = cand[np.argmin(exact)]
        out[s:s + chunk] = idx
    return out


def vq_nearest(x, cb: Codebook) -> tuple[int, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cb.dim,):
        raise ValueError(f"expected a {cb.dim}-vector, got shape {x.shape}")
    i = int(nearest_batch(x[None], cb.entries)[0])
    return i, cb.entries[i]


@dataclass
class RvqCodec:
    codebooks: list[Codebook]

    def __post_init__(self):
        if not self.codebooks:
            raise ValueError("RVQ needs at least one stage")
        dims = {cb.dim for cb in self.codebooks}
        if len(dims) != 1:
            raise ValueError("all RVQ stages must share the embedding dimension")

    @property
    def depth(self) -> int:
        return len(self.codebooks)

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim

    @property
    def bits_per_input(self) -> int:
        return sum(ceil_log2(cb.size) for cb in self.codebooks)

    def encode_batch(self, X: np.ndarray, depth: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected (n, {self.dim}) inputs, got {X.shape}")
        r = X.copy()
        codes = []
        for cb in self.codebooks[: depth or self.depth]:
            i = nearest_batch(r, cb.entries)
            r -= cb.entries[i]
            codes.append(i)
        return np.stack(codes, axis=1) if codes else np.zeros((len(X), 0), dtype=np.int64)

    def decode_batch(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros((codes.shape[0], self.dim))
        for d in range(codes.shape[1]):
            cb = self.codebooks[d]
            if np.any(codes[:, d] < 0) or np.any(codes[:, d] >= cb.size):
                raise CorruptStreamError(f"stage {d} code outside [0, {cb.size})")
            out += cb.entries[codes[:, d]]
        return out

    def stage_inputs(self, X: np.ndarray) -> list[np.ndarray]:
        """Residual fed to each stage: [r_0, r_1, ..., r_{D-1}]."""
        r = np.asarray(X, dtype=np.float64).copy()
        out = []
        for cb in self.codebooks:
            out.append(r.copy())
            r -= cb.entries[nearest_batch(r, cb.entries)]
        return out

    def freeze(self) -> "RvqCodec":
        return RvqCodec([cb.freeze() for cb in self.codebooks])

    @property
    def frozen(self) -> bool:
        return all(cb.frozen for cb in self.codebooks)


def rvq_encode(x, codec: RvqCodec) -> list[int]:
    return [int(c) for c in codec.encode_batch(np.asarray(x, dtype=np.float64)[None])[0]]


def rvq_decode(codes, codec: RvqCodec) -> np.ndarray:
    return codec.decode_batch(np.asarray(codes, dtype=np.int64)[None])[0]


def random_codec(rng: np.random.Generator, depth: int, size: int, dim: int, name: str = "") -> RvqCodec:
    """Codec whose stage scales shrink geometrically; handy for tests and initialisation.

    Entry 0 of every stage is the zero vector, so no stage can increase the residual.
    """
    books = []
    for d in range(depth):
        e = rng.normal(size=(size, dim)) * 0.5**d
        e[0] = 0.0
        books.append(Codebook(e, id=f"{name}/{d}"))
    return RvqCodec(books)


# -- k-means -----------------------------------------------------------------

def _objective(P: np.ndarray, C: np.ndarray, assign: np.ndarray) -> float:
    return float(((P - C[assign]) ** 2).sum())


def _kmeanspp(P: np.ndarray, N: int, rng: np.random.Generator) -> np.ndarray:
    C = np.empty((N, P.shape[1]))
    C[0] = P[rng.integers(len(P))]
    d2 = ((P - C[0]) ** 2).sum(1)
    for k in range(1, N):
        tot = d2.sum()
        j = rng.integers(len(P)) if tot <= 0 else rng.choice(len(P), p=d2 / tot)
        C[k] = P[j]
        d2 = np.minimum(d2, ((P - C[k]) ** 2).sum(1))
    return C


def lloyd(P: np.ndarray, C: np.ndarray, iters: int) -> tuple[np.ndarray, list[float]]:
    """Lloyd iterations with farthest-point repair of empty clusters.

    Returns the centroids and the objective after every iteration.
    """
    C = C.copy()
    history = []
    prev = None
    for _ in range(iters):
        assign = nearest_batch(P, C)
        counts = np.bincount(assign, minlength=len(C))
        for k in np.nonzero(counts == 0)[0]:
            dist = ((P - C[assign]) ** 2).sum(1)
            j = int(np.argmax(dist))
            if dist[j] <= 0:
                break
            C[k] = P[j]
            assign[j] = k
            counts = np.bincount(assign, minlength=len(C))
        sums = np.zeros_like(C)
        np.add.at(sums, assign, P)
        nz = counts > 0
        C[nz] = sums[nz] / counts[nz, None]
        assign = nearest_batch(P, C)
        history.append(_objective(P, C, assign))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
    return C, history


def hartigan(P: np.ndarray, C: np.ndarray, max_moves: int | None = None) -> tuple[np.ndarray, list[float]]:
    """Single-point transfers that strictly lower the objective, best move first.

    Moving x from cluster a (size n_a > 1) to b changes the objective by
    n_b/(n_b+1)|x - c_b|^2 - n_a/(n_a-1)|x - c_a|^2. Runs until no move helps.
    """
    assign = nearest_batch(P, C)
    counts = np.bincount(assign, minlength=len(C)).astype(np.float64)
    C = C.copy()
    nz = counts > 0
    sums = np.zeros_like(C)
    np.add.at(sums, assign, P)
    C[nz] = sums[nz] / counts[nz, None]
    history = [_objective(P, C, assign)]
    scale = max(history[0], 1e-300)
    rows = np.arange(len(P))
    for _ in range(max_moves if max_moves is not None else 10 * len(P)):
        d2 = ((P[:, None, :] - C[None]) ** 2).sum(-1)
        na = counts[assign]
        remove = np.where(na > 1, na / np.maximum(na - 1, 1) * d2[rows, assign], 0.0)
        add = counts / (counts + 1) * d2
        delta = add - remove[:, None]
        delta[rows, assign] = np.inf
        delta[na <= 1] = np.inf
        i, b = np.unravel_index(np.argmin(delta), delta.shape)
        if not delta[i, b] < -1e-12 * scale:
            break
        a = assign[i]
        C[a] = (C[a] * counts[a] - P[i]) / (counts[a] - 1)
        C[b] = (C[b] * counts[b] + P[i]) / (counts[b] + 1)
        counts[a] -= 1
        counts[b] += 1
        assign[i] = b
        history.append(_objective(P, C, assign))
    return C, history


def kmeans(points, N: int, iters: int = 50, seed: int = 0, n_init: int = 4, refine: bool = True):
    """Best of ``n_init`` k-means++ seeded Lloyd runs: (centroids, objective, histories).

    ``refine`` follows each Lloyd run with Hartigan transfers (cheap for small inputs).
    """
    if N <= 0:
        raise ValueError("number of clusters must be positive")
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if len(P) == 0:
        raise ValueError("k-means needs at least one point")
    rng = np.random.default_rng(seed)
    best, best_obj, histories = None, np.inf, []
    for _ in range(n_init):
        C, hist = lloyd(P, _kmeanspp(P, N, rng), iters)
        if refine:
            C, more = hartigan(P, C)
            hist = hist + more[1:]
        obj = _objective(P, C, nearest_batch(P, C))
        histories.append(hist)
        if obj < best_obj:
            best, best_obj = C, obj
    return best, best_obj, histories


def kmeans_fit(points, N: int, iters: int = 50, seed: int = 0, n_init: int = 16, id: str = "",
               refine: bool = True) -> Codebook:
    C, _, _ = kmeans(points, N, iters, seed, n_init, refine)
    return Codebook(C, id=id)


def ema_update(cb: Codebook, batch, assignments, decay: float = 0.99, eps: float = 1e-5) -> Codebook:
    """EMA of per-entry counts and sums; entries that receive no vectors stay put."""
    if cb.frozen:
        raise FrozenCodebookError(f"codebook {cb.id!r} is frozen")
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, cb.dim)
    assignments = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if len(batch) == 0:
        return replace(cb)
    n = np.bincount(assignments, minlength=cb.size).astype(np.float64)
    s = np.zeros_like(cb.entries)
    np.add.at(s, assignments, batch)
    hit = n > 0
    counts, sums, entries = cb.ema_counts.copy(), cb.ema_sums.copy(), cb.entries.copy()
    counts[hit] = decay * counts[hit] + n[hit]
    sums[hit] = decay * sums[hit] + s[hit]
    entries[hit] = sums[hit] / np.maximum(counts[hit], eps)[:, None]
    return Codebook(entries, cb.id, False, counts, sums)


def commitment_loss(x, x_hat):
    """Mean squared distance from x to the (gradient-stopped) quantised value."""
    import torch

    x = torch.as_tensor(x)
    x_hat = torch.as_tensor(x_hat, dtype=x.dtype)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat.detach()) ** 2).mean()


def straight_through(x, x_hat):
    """Forward value x_hat, gradient copied to x."""
    return x + (x_hat - x).detach()
