"""PSNR and SSIM on [0,1] images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b):
    """10*log10(1/MSE) for same-shape images in [0,1]; 100 dB at zero MSE."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def _filter2(img, kernel):
    """Valid-mode 2-D correlation via sliding windows."""
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b):
    """Mean local SSIM, 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03, L=1.

    Color images are converted to grayscale by the channel mean.
    """
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _filter2(ga, kernel)
    mu_b = _filter2(gb, kernel)
    var_a = _filter2(ga * ga, kernel) - mu_a**2
    var_b = _filter2(gb * gb, kernel) - mu_b**2
    cov = _filter2(ga * gb, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_direct(a, b):
    """Independent per-window loop implementation; the oracle for `ssim`."""
    ga, gb = _to_gray(a), _to_gray(b)
    if min(ga.shape) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    kernel = _gaussian_kernel()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    h, w = ga.shape
    vals = []
    for i in range(h - SSIM_WINDOW + 1):
        for j in range(w - SSIM_WINDOW + 1):
            wa = ga[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW]
            wb = gb[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW]
            mu_a = float((wa * kernel).sum())
            mu_b = float((wb * kernel).sum())
            var_a = float((wa * wa * kernel).sum()) - mu_a**2
            var_b = float((wb * wb * kernel).sum()) - mu_b**2
            cov = float((wa * wb * kernel).sum()) - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """Per-frame PSNR/SSIM plus clip means."""

    psnr_frames: list
    ssim_frames: list

    @property
    def psnr_mean(self):
        return float(np.mean(self.psnr_frames))

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim_frames))

    def to_csv(self):
        lines = ["frame,psnr_db,ssim"]
        for i, (p, s) in enumerate(zip(self.psnr_frames, self.ssim_frames)):
            lines.append(f"{i},{p:.6f},{s:.6f}")
        lines.append(f"mean,{self.psnr_mean:.6f},{self.ssim_mean:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_frames(pred_frames, gt_frames):
    if len(pred_frames) != len(gt_frames):
        raise ValueError("frame count mismatch")
    ps = [psnr(p, g) for p, g in zip(pred_frames, gt_frames)]
    ss = [ssim(p, g) for p, g in zip(pred_frames, gt_frames)]
    return MetricReport(psnr_frames=ps, ssim_frames=ss)
