import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from gsq.nn import (
    BlockReducer, HuberState, Optimizer, SparseMixer, bce_logits, conv3_block_reduce, grad_check, huber,
    linear_forward, load_checkpoint, neighbor_table, optimizer_step, save_checkpoint, sparse_unet_mix,
)

torch.set_default_dtype(torch.float32)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# -- linear ------------------------------------------------------------------------

def test_linear_examples(rng):
    x = t64(rng.normal(size=(5, 3)))
    np.testing.assert_allclose(linear_forward(x, torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)), x)
    b = t64([1.0, -2.0])
    np.testing.assert_allclose(linear_forward(x, torch.zeros(2, 3, dtype=torch.float64), b), b.expand(5, 2))
    with pytest.raises(ValueError):
        linear_forward(x, torch.zeros(2, 4, dtype=torch.float64))


def test_linear_gradcheck(rng):
    rep = grad_check(linear_forward, [t64(rng.normal(size=(4, 3))), t64(rng.normal(size=(2, 3))), t64(rng.normal(size=2))])
    assert rep.passed, rep.failures


# -- block reducer -----------------------------------------------------------------

def test_block_reducer_shapes_and_empty_blocks():
    torch.manual_seed(0)
    red = BlockReducer(8, 12, 6).double()
    feats = torch.randn(3, 64, 8, dtype=torch.float64)
    mask = torch.zeros(3, 64, dtype=torch.bool)
    out = red(feats, mask)
    assert out.shape == (3, 12)
    # all-empty blocks depend on the pad only
    np.testing.assert_allclose(out[0].detach(), out[1].detach())
    np.testing.assert_allclose(out[0].detach(), red(torch.randn(1, 64, 8, dtype=torch.float64), mask[:1])[0].detach())
    red2 = BlockReducer(16, 12, 6)
    assert red2(torch.randn(2, 64, 16), torch.ones(2, 64, dtype=torch.bool)).shape == (2, 12)
    with pytest.raises(ValueError):
        BlockReducer(8, 12, 6, K=2)
    with pytest.raises(ValueError):
        red(torch.randn(1, 27, 8, dtype=torch.float64), torch.ones(1, 27, dtype=torch.bool))


def test_block_reducer_spatial_layout():
    # one 2x2x2 sub-block feeds exactly one position of the first convolution
    torch.manual_seed(0)
    red = BlockReducer(1, 1, 1).double()
    with torch.no_grad():
        red.conv1.weight.fill_(1.0)
        red.conv1.bias.zero_()
        red.conv2.weight.zero_()
        red.conv2.bias.zero_()
        red.conv2.weight[0, 0, 1, 0, 0] = 1.0  # (z=1, y=0, x=0) of the 2x2x2 map
    feats = torch.zeros(1, 64, 1, dtype=torch.float64)
    mask = torch.ones(1, 64, dtype=torch.bool)
    with torch.no_grad():
        red.pad.zero_()
    i = 0 + 4 * (0 + 4 * 2)  # local (x=0, y=0, z=2) lies in sub-block z=1
    feats[0, i, 0] = 1.0
    assert float(red(feats, mask)[0, 0].detach()) == pytest.approx(float(torch.nn.functional.silu(torch.tensor(1.0))))
    feats[0, i, 0] = 0.0
    feats[0, 2, 0] = 1.0  # x=2: sub-block x=1, not read by the probe weight
    assert float(red(feats, mask)[0, 0].detach()) == 0.0


def test_block_reducer_gradcheck_through_mask_and_pad(rng):
    torch.manual_seed(1)
    red = BlockReducer(4, 6, 5).double()
    mask = torch.as_tensor(rng.random((2, 64)) < 0.4)

    def fn(feats, pad):
        with torch.no_grad():
            red.pad.copy_(pad)
        red.pad.requires_grad_(False)
        x = torch.where(mask[..., None], feats, pad.expand_as(feats))
        return red(x, torch.ones_like(mask))

    rep = grad_check(fn, [t64(rng.normal(size=(2, 64, 4))), t64(rng.normal(size=4))], samples=20)
    assert rep.passed, rep.failures
    assert conv3_block_reduce(torch.zeros(1, 64, 4, dtype=torch.float64), mask[:1], red).shape == (1, 6)


# -- sparse mixer ------------------------------------------------------------------

def test_neighbor_table_marks_absent():
    coords = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1]])
    tab = neighbor_table(coords)
    assert tab.shape == (3, 27)
    centre = 13  # offset (0, 0, 0)
    np.testing.assert_array_equal(tab[:, centre], [0, 1, 2])
    # +x neighbour of block 0 is block 1, -x neighbour of block 1 is block 0
    assert tab[0, 14] == 1 and tab[1, 12] == 0
    assert tab[0, 22] == 2
    # each block sees itself and the other two (face or edge neighbours)
    assert (tab == 3).sum() == 27 * 3 - 9


def test_mixer_depth_zero_identity():
    x = torch.randn(4, 8)
    np.testing.assert_array_equal(SparseMixer(8, 0)(x, neighbor_table(np.eye(4, 3, dtype=int))), x)


def test_mixer_single_block_depends_on_pad_only():
    torch.manual_seed(0)
    mix = SparseMixer(6, 2)
    x = torch.randn(1, 6)
    a = mix(x, neighbor_table(np.array([[2, 2, 2]])))
    b = mix(x, neighbor_table(np.array([[0, 3, 1]])))
    np.testing.assert_allclose(a.detach(), b.detach(), atol=1e-6)


@given(st.integers(0, 2**31 - 1))
def test_mixer_translation_equivariance(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed % 1000)
    mix = SparseMixer(5, 2)
    lin = rng.choice(4**3, size=int(rng.integers(1, 20)), replace=False)
    coords = np.stack([lin % 4, (lin // 4) % 4, lin // 16], axis=1)
    x = torch.randn(len(coords), 5)
    a = sparse_unet_mix(x, coords, mix)
    b = sparse_unet_mix(x, coords + np.array([1, 0, 0]), mix)
    np.testing.assert_allclose(a.detach(), b.detach(), atol=1e-6)


def test_mixer_gradcheck(rng):
    torch.manual_seed(0)
    mix = SparseMixer(4, 2).double()
    coords = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 3, 3]])
    rep = grad_check(lambda x: mix(x, neighbor_table(coords)), [t64(rng.normal(size=(4, 4)))])
    assert rep.passed, rep.failures


# -- losses ------------------------------------------------------------------------

def test_huber_examples():
    assert float(huber(torch.tensor([0.0]), torch.tensor([0.0]))) == 0.0
    assert float(huber(torch.tensor([0.1]), torch.tensor([0.0]), 1.0)) == pytest.approx(0.005)
    assert float(huber(torch.tensor([2.0]), torch.tensor([0.0]), HuberState(1.0))) == pytest.approx(1.5)
    assert float(huber(torch.tensor([0.0, 2.0]), torch.tensor([0.0, 0.0]), 1.0)) == pytest.approx(0.75)


def test_huber_gradcheck_away_from_kink(rng):
    p = rng.normal(size=30)
    t = rng.normal(size=30)
    r = np.abs(p - t)
    keep = np.abs(r - 0.7) > 0.05
    rep = grad_check(lambda a, b: huber(a, b, 0.7), [t64(p[keep]), t64(t[keep])], samples=30)
    assert rep.passed, rep.failures


def test_huber_state_update_rule():
    st_ = HuberState(1.0)
    r = np.linspace(0, 1, 101)
    st_.update(r)
    assert st_.delta == pytest.approx(0.9 * 1.0 + 0.1 * np.percentile(r, 90))
    st_.update(np.array([]))
    before = st_.delta
    assert st_.delta == before


@given(st.lists(st.lists(st.floats(-5, 5), min_size=1, max_size=10), min_size=1, max_size=20))
def test_huber_state_positive_and_bounded(batches):
    s = HuberState()
    seen = 0.0
    for b in batches:
        s.update(np.array(b))
        seen = max(seen, float(np.abs(b).max()))
        if seen > 0:
            assert 0 < s.delta <= seen + 1e-12


def test_bce_examples():
    assert float(bce_logits(torch.tensor([0.0]), torch.tensor([1.0]))) == pytest.approx(math.log(2))
    assert float(bce_logits(torch.tensor([20.0]), torch.tensor([1.0]))) == pytest.approx(2.06e-9, rel=1e-2)
    assert math.isfinite(float(bce_logits(torch.tensor([-1e4, 1e4]), torch.tensor([1.0, 0.0]))))


def test_bce_gradient_closed_form(rng):
    z = t64(rng.normal(size=12) * 3).requires_grad_(True)
    y = t64(rng.uniform(size=12))
    bce_logits(z, y).backward()
    np.testing.assert_allclose(z.grad, (torch.sigmoid(z) - y).detach() / 12, rtol=1e-12)
    rep = grad_check(bce_logits, [z.detach(), y])
    assert rep.passed, rep.failures


# -- optimiser ---------------------------------------------------------------------

def _params(vals):
    return [torch.nn.Parameter(torch.tensor(v, dtype=torch.float64)) for v in vals]


def test_optimizer_zero_grad_noop():
    ps = _params([[1.0, 2.0], [3.0]])
    opt = Optimizer(ps, lr=0.1)
    for p in ps:
        p.grad = torch.zeros_like(p)
    opt.step()
    np.testing.assert_array_equal(ps[0].detach(), [1.0, 2.0])


def test_optimizer_first_step_is_sign():
    ps = _params([[0.0, 0.0, 0.0]])
    opt = Optimizer(ps, lr=0.01, max_norm=None)
    ps[0].grad = torch.tensor([0.3, -0.02, 0.5], dtype=torch.float64)
    opt.step()
    # bias-corrected first step: m_hat/sqrt(v_hat) = g/|g|
    np.testing.assert_allclose(ps[0].detach(), [-0.01, 0.01, -0.01], rtol=1e-6)


def test_optimizer_clipping_scales_grads():
    ps = _params([[0.0, 0.0]])
    opt = Optimizer(ps, lr=0.0, max_norm=1.0)
    ps[0].grad = torch.tensor([6.0, 8.0], dtype=torch.float64)
    optimizer_step(opt)
    np.testing.assert_allclose(ps[0].grad, [0.6, 0.8], rtol=1e-6)


def test_optimizer_skips_non_finite():
    ps = _params([[1.0]])
    opt = Optimizer(ps, lr=0.1)
    ps[0].grad = torch.tensor([float("nan")], dtype=torch.float64)
    assert opt.step() is False and opt.skipped == 1
    assert float(ps[0].detach()) == 1.0


def test_optimizer_deterministic(rng):
    g = rng.normal(size=(5, 3))
    finals = []
    for _ in range(2):
        ps = _params([[0.5, -0.5, 1.0]])
        opt = Optimizer(ps, lr=0.05, weight_decay=0.01)
        for row in g:
            ps[0].grad = torch.tensor(row)
            opt.step()
        finals.append(ps[0].detach().numpy().copy())
    np.testing.assert_array_equal(finals[0], finals[1])


# -- grad_check itself -------------------------------------------------------------

def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x g

    rep = grad_check(Bad.apply, [torch.tensor([1.0, 2.0, 3.0])])
    assert not rep.passed and rep.failures


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    named = {"a.weight": torch.tensor(rng.normal(size=(3, 2)), dtype=torch.float32), "b": torch.tensor(2.5)}
    data = save_checkpoint(named, tmp_path / "m.gsqw")
    assert data[:4] == b"GSQW"
    assert int.from_bytes(data[4:8], "little") == 2
    back = load_checkpoint(tmp_path / "m.gsqw")
    assert set(back) == set(named)
    for k in named:
        np.testing.assert_array_equal(back[k].numpy(), named[k].numpy())
    with pytest.raises(ValueError):
        load_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        load_checkpoint(data[:-3])
