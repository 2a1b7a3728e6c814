"""PSNR / SSIM and per-scene evaluation reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .gauss import Scene
from .render import RenderConfig, render

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    n = len(g)
    H, W = img.shape[:2]
    if H < n or W < n:
        raise ValueError(f"image {H}x{W} is smaller than the {n}x{n} SSIM window")
    rows = sum(g[i] * img[i:H - n + 1 + i] for i in range(n))
    return sum(g[j] * rows[:, j:W - n + 1 + j] for j in range(n))


def ssim_map(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (saa + sbb + C2)
    return num / den


def ssim(a, b) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5), averaged over pixels and channels."""
    return float(ssim_map(a, b).mean())


@dataclass
class SceneReport:
    psnr: list[float]
    ssim: list[float]
    storage_bits: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def rows(self) -> list[dict]:
        out = [{"view": i, "psnr": p, "ssim": s, "lpips": "unavailable"}
               for i, (p, s) in enumerate(zip(self.psnr, self.ssim))]
        out.append({"view": "mean", "psnr": self.mean_psnr, "ssim": self.mean_ssim, "lpips": "unavailable"})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["view", "psnr", "ssim", "lpips"])
            w.writeheader()
            w.writerows(self.rows())

    def summary(self) -> str:
        s = f"views={len(self.psnr)} PSNR={self.mean_psnr:.3f} dB SSIM={self.mean_ssim:.4f} LPIPS=unavailable"
        if self.storage_bits is not None:
            s += f" storage={self.storage_bits} bits ({self.storage_bits / 8 / 1024:.2f} KiB)"
        return s


def evaluate_scene(decoded: Scene, truth, cams: list, storage_bits: int | None = None,
                   cfg: RenderConfig = RenderConfig()) -> SceneReport:
    """Render ``decoded`` at every camera and compare with ``truth`` (a Scene or a list of images)."""
    if not cams:
        raise ValueError("need at least one camera")
    if isinstance(truth, Scene):
        truth = [render(truth, c, cfg) for c in cams]
    if len(truth) != len(cams):
        raise ValueError("one truth image per camera")
    preds = [render(decoded, c, cfg) for c in cams]
    return SceneReport([psnr(p, t) for p, t in zip(preds, truth)],
                       [ssim(p, t) for p, t in zip(preds, truth)], storage_bits)
