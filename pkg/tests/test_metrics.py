import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsq.metrics import C1, C2, SceneReport, evaluate_scene, gaussian_window, psnr, ssim
from gsq.render import RenderConfig
from gsq.scenelab import gen_scene, sample_cameras


def ssim_oracle(a, b):
    """Window-by-window SSIM with an explicit 2D Gaussian kernel."""
    x = np.arange(11) - 5.0
    k = np.exp(-(x[:, None] ** 2 + x[None] ** 2) / (2 * 1.5**2))
    k /= k.sum()
    vals = []
    for c in range(a.shape[2]):
        for i in range(a.shape[0] - 10):
            for j in range(a.shape[1] - 10):
                pa, pb = a[i:i + 11, j:j + 11, c], b[i:i + 11, j:j + 11, c]
                ma, mb = (k * pa).sum(), (k * pb).sum()
                va, vb = (k * (pa - ma) ** 2).sum(), (k * (pb - mb) ** 2).sum()
                cov = (k * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma**2 + mb**2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def test_psnr_examples(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == math.inf
    b = np.full((4, 4, 3), 0.5)
    assert np.isclose(psnr(b, b + 0.1), 20.0)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


@given(st.integers(0, 10**6))
def test_psnr_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(5, 6, 3)), r.uniform(size=(5, 6, 3))
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identity_and_window():
    g = gaussian_window()
    assert len(g) == 11 and np.isclose(g.sum(), 1) and np.allclose(g, g[::-1])
    a = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert np.isclose(ssim(a, a), 1.0)


def test_ssim_matches_reference(rng):
    a = rng.uniform(size=(14, 15, 2))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert np.isclose(ssim(a, b), ssim_oracle(a, b), atol=1e-10)


def test_ssim_negative_for_inverted_structure():
    y, x = np.mgrid[0:24, 0:24]
    a = (0.5 + 0.4 * np.sin(x / 2.0) * np.cos(y / 3.0))[..., None].repeat(3, 2)
    neg = 1.0 - a
    val = ssim(a, neg)
    assert val < 0 and np.isclose(val, ssim_oracle(a, neg), atol=1e-10)


def test_ssim_constant_images_luminance_term():
    c1, c2 = 0.3, 0.5
    a, b = np.full((12, 12, 3), c1), np.full((12, 12, 3), c2)
    want = (2 * c1 * c2 + C1) / (c1**2 + c2**2 + C1)
    assert np.isclose(ssim(a, b), want)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_evaluate_scene_identity_and_rows(tmp_path):
    s = gen_scene(3)
    cams = sample_cameras(4, width=16, height=16)
    rep = evaluate_scene(s, s, cams, storage_bits=1234, cfg=RenderConfig())
    assert rep.psnr == [math.inf] * 4 and np.allclose(rep.ssim, 1)
    rows = rep.rows()
    assert len(rows) == 5 and rows[-1]["view"] == "mean"
    rep.write_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as f:
        back = list(csv.DictReader(f))
    assert [r["view"] for r in back] == ["0", "1", "2", "3", "mean"]
    assert "1234 bits" in rep.summary()


def test_fifty_views_give_fifty_rows():
    rep = SceneReport([20.0] * 50, [0.9] * 50)
    assert len(rep.rows()) == 51
    assert rep.mean_psnr == 20.0


def test_evaluate_scene_errors():
    s = gen_scene(3)
    cams = sample_cameras(2, width=16, height=16)
    with pytest.raises(ValueError):
        evaluate_scene(s, s, [])
    with pytest.raises(ValueError):
        evaluate_scene(s, [np.zeros((16, 16, 3))], cams)
    rep = evaluate_scene(s, [np.zeros((16, 16, 3))] * 2, cams)
    assert all(np.isfinite(rep.psnr))
