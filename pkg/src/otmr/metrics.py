"""PSNR, SSIM and NMSE on magnitude images, plus report aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ValidationError

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def _as_magnitude(img):
    a = getattr(img, "data", img)
    a = np.asarray(a, dtype=np.float64)
    # (2, H, W) complex layout or (1, H, W) magnitude
    if a.ndim == 3:
        a = np.hypot(a[0], a[1]) if a.shape[0] == 2 else np.abs(a[0])
    return a


def _pair(ref, est):
    ref, est = _as_magnitude(ref), _as_magnitude(est)
    if ref.shape != est.shape:
        raise ValidationError(f"shape mismatch: {ref.shape} vs {est.shape}")
    return ref, est


def psnr(ref, est, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images coincide."""
    if peak <= 0:
        raise ValidationError("peak must be positive")
    ref, est = _pair(ref, est)
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(ref, est):
    """Mean SSIM over 7x7 uniform windows (k1=0.01, k2=0.03, range 1).

    Window statistics use the unbiased covariance estimate; the mean skips a
    3-pixel border where the window would leave the image.
    """
    ref, est = _pair(ref, est)
    if min(ref.shape) < SSIM_WINDOW:
        raise ValidationError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    n = SSIM_WINDOW * SSIM_WINDOW
    cov_norm = n / (n - 1)
    ux = uniform_filter(ref, SSIM_WINDOW)
    uy = uniform_filter(est, SSIM_WINDOW)
    vx = cov_norm * (uniform_filter(ref * ref, SSIM_WINDOW) - ux * ux)
    vy = cov_norm * (uniform_filter(est * est, SSIM_WINDOW) - uy * uy)
    vxy = cov_norm * (uniform_filter(ref * est, SSIM_WINDOW) - ux * uy)
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = SSIM_WINDOW // 2
    return float(s[pad:-pad, pad:-pad].mean())


def nmse(ref, est):
    ref, est = _pair(ref, est)
    denom = float(np.sum(ref * ref))
    if denom == 0.0:
        raise ValidationError("NMSE undefined for an all-zero reference")
    return float(np.sum((ref - est) ** 2)) / denom


def _finite_stats(values):
    a = np.asarray(values, dtype=np.float64)
    finite = a[np.isfinite(a)]
    if finite.size < a.size:
        # any infinite PSNR makes the mean infinite; std is taken over finite values
        return math.inf, float(finite.std()) if finite.size else 0.0
    return float(a.mean()), float(a.std())


@dataclass
class MetricReport:
    """Per-sample metrics for one method, with mean and standard deviation."""

    method: str
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    nmse: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)

    @property
    def n_samples(self):
        return len(self.psnr)

    def add(self, sample_id, ref, est, peak=1.0):
        self.sample_ids.append(sample_id)
        self.psnr.append(psnr(ref, est, peak))
        self.ssim.append(ssim(ref, est))
        self.nmse.append(nmse(ref, est))

    def _ordered(self, values):
        # sums are reduced in sorted-id order so aggregation is order independent
        order = np.argsort(np.asarray(self.sample_ids, dtype=object).astype(str), kind="stable")
        return [values[i] for i in order]

    def summary(self):
        out = {"method": self.method, "n_samples": self.n_samples}
        for name in ("psnr", "ssim", "nmse"):
            mean, std = _finite_stats(self._ordered(getattr(self, name)))
            out[f"{name}_mean"] = mean
            out[f"{name}_std"] = std
        out["psnr_infinite"] = any(math.isinf(v) for v in self.psnr)
        return out

    def records(self):
        return [
            {"method": self.method, "sample": sid, "psnr": p, "ssim": s, "nmse": n}
            for sid, p, s, n in zip(self.sample_ids, self.psnr, self.ssim, self.nmse)
        ]


def _fmt_psnr(v):
    return "inf" if math.isinf(v) else f"{v:.2f}"


def format_table(reports, title=""):
    """Aligned text table: method, PSNR, SSIM and NMSE as ``mean±std``."""
    header = (
        f"# SSIM: {SSIM_WINDOW}x{SSIM_WINDOW} uniform window, k1={SSIM_K1}, k2={SSIM_K2}, range={SSIM_RANGE}\n"
    )
    rows = [("Method", "PSNR", "SSIM", "NMSE")]
    for r in reports:
        s = r.summary()
        rows.append(
            (
                r.method,
                f"{_fmt_psnr(s['psnr_mean'])}±{s['psnr_std']:.2f}",
                f"{s['ssim_mean']:.4f}±{s['ssim_std']:.4f}",
                f"{s['nmse_mean']:.4f}±{s['nmse_std']:.4f}",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    text = header + "\n".join(lines) + "\n"
    return (title + "\n" + text) if title else text


def dump_records(reports, path):
    """Write per-sample records followed by one summary record per method (JSON lines)."""
    with open(path, "w") as fh:
        for r in reports:
            for rec in r.records():
                fh.write(json.dumps(_jsonable(rec)) + "\n")
        for r in reports:
            fh.write(json.dumps(_jsonable({"summary": True, **r.summary()})) + "\n")


def _jsonable(rec):
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in rec.items()}
