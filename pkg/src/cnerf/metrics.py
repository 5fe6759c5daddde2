"""Image quality metrics: PSNR and SSIM over [0, 1] float images.

PSNR is computed jointly over all channels. SSIM follows the standard
Gaussian-window formulation (11x11, sigma 1.5, K1=0.01, K2=0.03, unit
dynamic range) on a luma conversion, averaged over valid windows; images
smaller than the window fall back to a single uniform whole-image window.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

_LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) in dB; identical images return +inf."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img @ _LUMA
    return img


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    a, b = _check_pair(a, b)
    x, y = _to_gray(a), _to_gray(b)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    if min(x.shape) < window:
        kernel = np.full(x.shape, 1.0 / x.size)
        windows_x = x[None, None]
        windows_y = y[None, None]
        weights = kernel[None, None]
    else:
        kernel = _gaussian_kernel(window, sigma)
        windows_x = np.lib.stride_tricks.sliding_window_view(x, (window, window))
        windows_y = np.lib.stride_tricks.sliding_window_view(y, (window, window))
        weights = kernel

    mu_x = (windows_x * weights).sum(axis=(-2, -1))
    mu_y = (windows_y * weights).sum(axis=(-2, -1))
    xx = (windows_x * windows_x * weights).sum(axis=(-2, -1)) - mu_x ** 2
    yy = (windows_y * windows_y * weights).sum(axis=(-2, -1)) - mu_y ** 2
    xy = (windows_x * windows_y * weights).sum(axis=(-2, -1)) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    instance: int
    view: int
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, instance: int, view: int, psnr_db: float, ssim_value: float) -> None:
        self.rows.append(MetricRow(instance, view, psnr_db, ssim_value))

    def instance_means(self) -> dict:
        by_instance: dict[int, list[MetricRow]] = {}
        for row in self.rows:
            by_instance.setdefault(row.instance, []).append(row)
        return {
            k: {"psnr_db": _mean_psnr([r.psnr_db for r in rows]),
                "ssim": float(np.mean([r.ssim for r in rows]))}
            for k, rows in sorted(by_instance.items())
        }

    def global_means(self) -> dict:
        if not self.rows:
            return {"psnr_db": 0.0, "ssim": 0.0}
        return {"psnr_db": _mean_psnr([r.psnr_db for r in self.rows]),
                "ssim": float(np.mean([r.ssim for r in self.rows]))}

    def to_json(self) -> str:
        # +inf PSNR (exact match) serializes as null to stay strict JSON.
        def enc(v):
            return None if np.isinf(v) else v

        payload = {
            "rows": [{"instance": r.instance, "view": r.view,
                      "psnr_db": enc(r.psnr_db), "ssim": r.ssim} for r in self.rows],
            "instance_means": {str(k): {"psnr_db": enc(v["psnr_db"]), "ssim": v["ssim"]}
                               for k, v in self.instance_means().items()},
            "global": {k: enc(v) if k == "psnr_db" else v
                       for k, v in self.global_means().items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["instance", "view", "psnr_db", "ssim"])
        for r in self.rows:
            writer.writerow([r.instance, r.view, r.psnr_db, r.ssim])
        return buf.getvalue()


def _mean_psnr(values) -> float:
    values = [v for v in values]
    if any(np.isinf(v) for v in values):
        finite = [v for v in values if not np.isinf(v)]
        return float("inf") if not finite else float(np.mean(finite))
    return float(np.mean(values))
