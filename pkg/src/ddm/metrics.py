"""Pixel-wise image quality metrics for images in [0, 1]."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ddm.exceptions import ShapeError
from ddm.validation import check_pair

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def mse(a, b) -> float:
    a, b = check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; ``inf`` when the images match."""
    err = mse(a, b)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / err))


def ssim(a, b, window=SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` positions, uniform weights, population moments."""
    a, b = check_pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects single 2-D images, got {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"image {a.shape} smaller than the {window}x{window} window")
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    # centred products so that ssim(a, a) is exactly 1
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def highpass_energy(img, cutoff=0.25) -> float:
    """Mean per-pixel power of the components above ``cutoff`` (cycles/pixel, radial).

    By Parseval this is ``mean(x_hp ** 2)`` for the high-passed, mean-removed image.
    """
    img = np.asarray(img, dtype=np.float64)
    power = np.abs(np.fft.fft2(img - img.mean())) ** 2
    fy = np.fft.fftfreq(img.shape[-2])[:, None]
    fx = np.fft.fftfreq(img.shape[-1])[None, :]
    mask = np.sqrt(fy ** 2 + fx ** 2) > cutoff
    return float(power[mask].sum() / img.size ** 2)


@dataclass
class MetricRow:
    id: int
    mse: float
    psnr: float
    ssim: float


def evaluate(recon, truth, ids=None) -> list[MetricRow]:
    recon, truth = check_pair(recon, truth, "reconstructions", "ground truth")
    ids = range(len(recon)) if ids is None else ids
    rows = [MetricRow(int(i), mse(r, g), psnr(r, g), ssim(r, g))
            for i, r, g in zip(ids, recon, truth)]
    return sorted(rows, key=lambda row: row.id)


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def metrics_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "mse", "psnr", "ssim"])
    for r in rows:
        writer.writerow([r.id, _fmt(r.mse), _fmt(r.psnr), _fmt(r.ssim)])
    return buf.getvalue()


def summarize(rows: list[MetricRow]) -> dict:
    """Mean and population std of each metric column (infinite PSNRs excluded)."""
    out = {}
    for name in ("mse", "psnr", "ssim"):
        vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        out[name] = (float(vals.mean()) if vals.size else float("nan"),
                     float(vals.std()) if vals.size else float("nan"))
    return out


def summary_line(rows: list[MetricRow]) -> str:
    s = summarize(rows)
    return "  ".join(f"{k}={_fmt(m)}+-{_fmt(sd)}" for k, (m, sd) in s.items())
