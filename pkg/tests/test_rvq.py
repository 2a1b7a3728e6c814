import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gsq.rvq import (
    Codebook, CorruptStreamError, FrozenCodebookError, RvqCodec, commitment_loss, ema_update, hartigan,
    kmeans, kmeans_fit, lloyd, nearest_batch, random_codec, rvq_decode, rvq_encode, straight_through,
    vq_nearest, _kmeanspp,
)


def brute_nearest(X, E):
    d = ((X[:, None, :] - E[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)  # argmin returns the first minimum


def brute_kmeans_optimum(P, N=2):
    best = np.inf
    for a in itertools.product(range(N), repeat=len(P)):
        a = np.array(a)
        obj = sum(((P[a == k] - P[a == k].mean(0)) ** 2).sum() for k in range(N) if np.any(a == k))
        best = min(best, obj)
    return best


# -- nearest neighbour -------------------------------------------------------------

def test_vq_nearest_examples():
    cb = Codebook([[0, 0], [1, 1]])
    assert vq_nearest([0.9, 0.8], cb)[0] == 1
    assert vq_nearest([0.5, 0.5], cb)[0] == 0
    i, e = vq_nearest([1, 1], cb)
    assert i == 1 and np.array_equal(e, [1, 1])
    with pytest.raises(ValueError):
        vq_nearest([1, 2, 3], cb)


def test_nearest_matches_brute_force(rng):
    X = rng.normal(size=(700, 5))
    E = rng.normal(size=(40, 5))
    np.testing.assert_array_equal(nearest_batch(X, E, chunk=128), brute_nearest(X, E))


def test_nearest_ties_pick_lowest_index(rng):
    E = rng.integers(-2, 3, size=(30, 3)).astype(float)
    E = np.concatenate([E, E])  # every entry has an exact duplicate further down
    X = rng.integers(-2, 3, size=(500, 3)).astype(float)  # many exact ties on integers
    got = nearest_batch(X, E)
    np.testing.assert_array_equal(got, brute_nearest(X, E))
    assert np.all(got < 30)


@given(arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)), arrays(np.float64, (9, 3), elements=st.floats(-1e3, 1e3)))
def test_nearest_distance_is_minimal(X, E):
    got = nearest_batch(X, E)
    d = ((X[:, None] - E[None]) ** 2).sum(-1)
    np.testing.assert_allclose(d[np.arange(len(X)), got], d.min(1), rtol=1e-9, atol=1e-9)


# -- codebooks and RVQ -------------------------------------------------------------

def test_codebook_validation():
    with pytest.raises(ValueError):
        Codebook(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        Codebook([[np.nan, 0.0]])
    with pytest.raises(ValueError):
        RvqCodec([])
    with pytest.raises(ValueError):
        RvqCodec([Codebook(np.zeros((2, 2))), Codebook(np.zeros((2, 3)))])


def test_rvq_hand_example():
    codec = RvqCodec([Codebook([[1, 0], [0, 1]]), Codebook([[0.25, 0], [0, 0.25]])])
    x = np.array([1.2, 0.1])
    assert rvq_encode(x, codec) == [0, 0]
    np.testing.assert_allclose(rvq_decode([0, 0], codec), [1.25, 0])
    np.testing.assert_allclose(x - rvq_decode([0, 0], codec), [-0.05, 0.1], atol=1e-15)


def test_rvq_exact_entry_then_zero():
    codec = RvqCodec([Codebook([[3, 1], [0, 2]]), Codebook([[1, 1], [0, 0]])])
    assert rvq_encode([0, 2], codec) == [1, 1]
    np.testing.assert_array_equal(rvq_decode([1, 1], codec), [0, 2])
    np.testing.assert_array_equal(rvq_decode([1, 1], RvqCodec([Codebook(np.zeros((2, 2)))] * 2)), [0, 0])


def test_rvq_depth_one_is_vq(rng):
    cb = Codebook(rng.normal(size=(16, 4)))
    for x in rng.normal(size=(20, 4)):
        assert rvq_encode(x, RvqCodec([cb])) == [vq_nearest(x, cb)[0]]


def test_rvq_decode_rejects_bad_codes(rng):
    codec = random_codec(rng, 2, 8, 3)
    with pytest.raises(CorruptStreamError):
        rvq_decode([0, 8], codec)
    with pytest.raises(CorruptStreamError):
        rvq_decode([-1, 0], codec)
    with pytest.raises(ValueError):
        codec.encode_batch(np.zeros((2, 4)))


@pytest.mark.parametrize("D, N, bits", [(4, 1024, 40), (1, 2, 1), (3, 256, 24), (2, 1000, 20), (6, 1, 0)])
def test_bits_per_input(D, N, bits):
    codec = RvqCodec([Codebook(np.zeros((N, 2)))] * D)
    assert codec.bits_per_input == bits


def test_residual_monotone_in_depth(rng):
    for D in range(1, 7):
        codec = random_codec(rng, D, 32, 6)
        X = rng.normal(size=(1000, 6))
        codes = codec.encode_batch(X)
        errs = [np.linalg.norm(X, axis=1)] + [
            np.linalg.norm(X - RvqCodec(codec.codebooks[:d]).decode_batch(codes[:, :d]), axis=1)
            for d in range(1, D + 1)]
        for a, b in zip(errs, errs[1:]):
            assert np.all(b <= a + 1e-12)


def test_monotonicity_needs_a_zero_entry():
    # without a zero entry a later stage can overshoot: residual 0.1, only entry 1.0
    codec = RvqCodec([Codebook([[1.0]]), Codebook([[1.0]])])
    err = [abs(1.1 - codec.decode_batch(codec.encode_batch([[1.1]])[:, :d])[0, 0]) for d in (1, 2)]
    assert err[1] > err[0]


def test_encode_prefix_consistency(rng):
    codec = random_codec(rng, 4, 16, 5)
    X = rng.normal(size=(50, 5))
    full = codec.encode_batch(X)
    np.testing.assert_array_equal(codec.encode_batch(X, depth=2), full[:, :2])
    ins = codec.stage_inputs(X)
    np.testing.assert_allclose(ins[0], X)
    np.testing.assert_allclose(ins[-1], X - codec.decode_batch(full[:, :3]), atol=1e-12)


def test_encode_decode_deterministic_and_frozen_untouched(rng):
    codec = random_codec(rng, 3, 32, 4).freeze()
    before = [cb.entries.copy() for cb in codec.codebooks]
    X = rng.normal(size=(200, 4))
    a, b = codec.encode_batch(X), codec.encode_batch(X)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(codec.decode_batch(a), codec.decode_batch(b))
    for cb, e in zip(codec.codebooks, before):
        assert cb.entries.tobytes() == e.tobytes()
    assert codec.frozen


def test_freeze_rounds_to_float32(rng):
    cb = Codebook(rng.normal(size=(4, 3))).freeze()
    np.testing.assert_array_equal(cb.entries, cb.entries.astype(np.float32).astype(np.float64))
    assert cb.frozen


# -- k-means -----------------------------------------------------------------------

def test_kmeans_examples():
    C, obj, _ = kmeans([[0, 0], [0, 1]], 2)
    assert obj == 0.0
    assert sorted(map(tuple, C)) == [(0.0, 0.0), (0.0, 1.0)]
    C, obj, _ = kmeans([0.0, 2.0], 1)
    np.testing.assert_allclose(C, [[1.0]])
    assert obj == 2.0
    with pytest.raises(ValueError):
        kmeans([[0.0]], 0)
    with pytest.raises(ValueError):
        kmeans(np.zeros((0, 2)), 2)


@pytest.mark.parametrize("seed", range(25))
def test_kmeans_fit_matches_exhaustive_optimum(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(int(rng.integers(2, 9)), int(rng.integers(1, 4))))
    cb = kmeans_fit(P, 2, seed=seed)
    obj = float(((P - cb.entries[nearest_batch(P, cb.entries)]) ** 2).sum())
    assert obj == pytest.approx(brute_kmeans_optimum(P), abs=1e-9)


def test_lloyd_objective_non_increasing(rng):
    for _ in range(10):
        P = rng.normal(size=(200, 3))
        C0 = _kmeanspp(P, 8, rng)
        _, hist = lloyd(P, C0, 50)
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        _, hist2 = hartigan(P, lloyd(P, C0, 50)[0])
        assert all(b <= a + 1e-9 for a, b in zip(hist2, hist2[1:]))
    for h in kmeans(rng.normal(size=(100, 2)), 5, n_init=3)[2]:
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_kmeans_repairs_empty_clusters():
    # more clusters than distinct locations: every centroid must still be finite
    P = np.array([[0.0], [0.0], [1.0], [5.0]])
    C, obj, _ = kmeans(P, 3, seed=0)
    assert np.all(np.isfinite(C)) and obj == 0.0
    C, obj, _ = kmeans(np.zeros((3, 2)), 3)
    assert np.all(np.isfinite(C)) and obj == 0.0


def test_kmeans_deterministic(rng):
    P = rng.normal(size=(120, 4))
    a, b = kmeans_fit(P, 6, seed=3), kmeans_fit(P, 6, seed=3)
    np.testing.assert_array_equal(a.entries, b.entries)


# -- EMA ---------------------------------------------------------------------------

def test_ema_empty_batch_is_noop(rng):
    cb = Codebook(rng.normal(size=(4, 2)))
    out = ema_update(cb, np.zeros((0, 2)), np.zeros(0, dtype=int))
    np.testing.assert_array_equal(out.entries, cb.entries)


def test_ema_decay_zero_gives_batch_mean(rng):
    cb = Codebook(rng.normal(size=(4, 2)))
    batch = rng.normal(size=(10, 2))
    out = ema_update(cb, batch, np.zeros(10, dtype=int), decay=0.0)
    np.testing.assert_allclose(out.entries[0], batch.mean(0))
    np.testing.assert_array_equal(out.entries[1:], cb.entries[1:])


def test_ema_recurrence_closed_form(rng):
    g = 0.9
    cb = Codebook([[4.0, -2.0]])
    batch = rng.normal(size=(5, 2))
    n, s = 5.0, batch.sum(0)
    counts, sums = 1.0, np.array([4.0, -2.0])
    for t in range(1, 40):
        cb = ema_update(cb, batch, np.zeros(5, dtype=int), decay=g)
        counts, sums = g * counts + n, g * sums + s
        # closed form of the recurrence: c_t = g^t c_0 + n (1 - g^t) / (1 - g)
        c_closed = g**t * 1.0 + n * (1 - g**t) / (1 - g)
        assert counts == pytest.approx(c_closed)
        np.testing.assert_allclose(cb.entries[0], sums / counts)
    np.testing.assert_allclose(cb.entries[0], batch.mean(0), atol=1e-2)


def test_ema_rejects_frozen_and_bad_decay(rng):
    cb = Codebook(rng.normal(size=(2, 2)))
    with pytest.raises(FrozenCodebookError):
        ema_update(cb.freeze(), np.zeros((1, 2)), [0])
    with pytest.raises(ValueError):
        ema_update(cb, np.zeros((1, 2)), [0], decay=1.0)


# -- straight-through --------------------------------------------------------------

def test_commitment_examples():
    assert float(commitment_loss(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 2.0]))) == 0.0
    assert float(commitment_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0]))) == 0.5
    with pytest.raises(ValueError):
        commitment_loss(torch.zeros(2), torch.zeros(3))


def test_commitment_gradient_only_to_x():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)
    xh = torch.tensor([0.0, -1.0, 1.5], dtype=torch.float64, requires_grad=True)
    commitment_loss(x, xh).backward()
    np.testing.assert_allclose(x.grad.numpy(), 2 * (x - xh).detach().numpy() / 3)
    assert xh.grad is None or torch.all(xh.grad == 0)
    assert torch.autograd.gradcheck(lambda v: commitment_loss(v, xh.detach()), (x,), rtol=1e-4)


def test_straight_through_contract():
    x = torch.tensor([0.2, 0.7], requires_grad=True)
    xh = torch.tensor([0.0, 1.0])
    y = straight_through(x, xh)
    np.testing.assert_array_equal(y.detach().numpy(), xh.numpy())
    (y * torch.tensor([3.0, -2.0])).sum().backward()
    np.testing.assert_array_equal(x.grad.numpy(), [3.0, -2.0])
