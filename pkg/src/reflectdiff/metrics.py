"""Image quality metrics: PSNR, SSIM, and the frequency-domain reflection
artifact measure (RAM), plus batch evaluation against a dataset manifest.

RAM is implemented literally as the Fourier round trip
|ifft(fft(pred) - fft(ref))|_1 / |ref|_1; by linearity of the transform this
equals the normalized spatial L1 difference, which serves as the built-in
cross-check. An optional high-pass mask is available for exploration only
and is never used for headline numbers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .data import DatasetManifest
from .images import load_image

__all__ = ["psnr", "ssim", "ram", "ram_batch", "evaluate", "MetricReport", "write_report"]

PSNR_CAP_DB = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); returns the 100 dB cap when MSE is exactly 0."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak**2 / mse)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    w = np.asarray(LUMA_WEIGHTS)
    return img @ w


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid region only.

    Multichannel inputs are converted to luma first. C1 = (0.01*peak)^2 and
    C2 = (0.03*peak)^2 as in the standard formulation.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x = _to_gray(a)
    y = _to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def f(img):
        return fftconvolve(img, win, mode="valid")

    mu_x = f(x)
    mu_y = f(y)
    xx = f(x * x) - mu_x**2
    yy = f(y * y) - mu_y**2
    xy = f(x * y) - mu_x * mu_y
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    )
    return float(np.mean(s))


def _highpass_mask(h: int, w: int, radius_frac: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.fft.fftfreq(h), np.fft.fftfreq(w), indexing="ij")
    return (np.hypot(yy, xx) >= radius_frac * 0.5).astype(np.float64)


def ram(t_hat: np.ndarray, t: np.ndarray, highpass_frac: float | None = None) -> float:
    """Reflection artifact measure for one image:
    |ifft2(fft2(t_hat) - fft2(t))|_1 / |t|_1, averaged over channels."""
    if t_hat.shape != t.shape:
        raise ValueError(f"shape mismatch {t_hat.shape} vs {t.shape}")
    a = np.asarray(t_hat, dtype=np.float64)
    b = np.asarray(t, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    vals = []
    mask = None
    if highpass_frac is not None:
        mask = _highpass_mask(a.shape[0], a.shape[1], highpass_frac)
    for c in range(a.shape[2]):
        denom = float(np.sum(np.abs(b[:, :, c])))
        if denom == 0.0:
            raise ValueError(f"reference channel {c} is all zeros; RAM undefined")
        diff = np.fft.fft2(a[:, :, c]) - np.fft.fft2(b[:, :, c])
        if mask is not None:
            diff = diff * mask
        num = float(np.sum(np.abs(np.fft.ifft2(diff))))
        vals.append(num / denom)
    return float(np.mean(vals))


def ram_batch(pairs, highpass_frac: float | None = None) -> float:
    """Mean RAM over an iterable of (t_hat, t) pairs."""
    vals = [ram(th, t, highpass_frac) for th, t in pairs]
    if not vals:
        raise ValueError("empty batch")
    return float(np.mean(vals))


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)  # {id, psnr, ssim, ram}
    aggregate: dict = field(default_factory=dict)
    config_hash: str = ""


def _metric_config_hash() -> str:
    cfg = {
        "peak": 1.0,
        "psnr_cap_db": PSNR_CAP_DB,
        "ssim_window": SSIM_WINDOW,
        "ssim_sigma": SSIM_SIGMA,
        "luma": LUMA_WEIGHTS,
    }
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def evaluate(manifest: DatasetManifest, predictions_dir, split: str = "test") -> MetricReport:
    """Score every `split` entry's prediction (<predictions_dir>/<id>.png)
    against its ground-truth transmission image."""
    entries = [e for e in manifest.entries if e.split == split]
    if not entries:
        raise ValueError(f"manifest has no entries with split {split!r}")
    pred_dir = Path(predictions_dir)
    missing = [e.id for e in entries if not (pred_dir / f"{e.id}.png").exists()]
    if missing:
        raise FileNotFoundError(
            f"{len(missing)} prediction(s) missing from {pred_dir}: "
            + ", ".join(missing[:10])
            + ("..." if len(missing) > 10 else "")
        )
    report = MetricReport(config_hash=_metric_config_hash())
    root = Path(manifest.root)
    for e in entries:
        truth = load_image(root / e.s_path)
        pred = load_image(pred_dir / f"{e.id}.png")
        report.per_image.append(
            {
                "id": e.id,
                "psnr": psnr(pred, truth),
                "ssim": ssim(pred, truth),
                "ram": ram(pred, truth),
            }
        )
    for key in ("psnr", "ssim", "ram"):
        report.aggregate[key] = float(np.mean([row[key] for row in report.per_image]))
    return report


def write_report(report: MetricReport, csv_path, json_path) -> None:
    """Per-image CSV plus a JSON summary with the aggregate means."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w") as f:
        f.write("id,psnr,ssim,ram\n")
        for row in report.per_image:
            f.write(f"{row['id']},{row['psnr']:.6f},{row['ssim']:.6f},{row['ram']:.6f}\n")
    with open(json_path, "w") as f:
        json.dump(
            {
                "aggregate": report.aggregate,
                "n_images": len(report.per_image),
                "config_hash": report.config_hash,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
