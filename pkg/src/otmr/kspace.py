"""Centered FFTs, Cartesian/radial sampling masks and data consistency.

Complex images use a two-channel real layout ``(..., 2, H, W)`` where channel
0 is the real part and channel 1 the imaginary part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError

SCHEMES = ("random", "equispaced", "radial")
CENTER_SHARE = 0.32


def to_complex(x):
    if x.shape[-3] != 2:
        raise ValidationError(f"expected a two-channel complex tensor, got shape {tuple(x.shape)}")
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])


def to_channels(z):
    return torch.stack([z.real, z.imag], dim=-3)


def magnitude(x):
    """Magnitude image ``(..., 1, H, W)`` of a two-channel complex tensor."""
    return torch.sqrt(x[..., 0:1, :, :] ** 2 + x[..., 1:2, :, :] ** 2)


def real_to_complex(x):
    """Lift a one-channel real image to the two-channel layout."""
    return torch.cat([x, torch.zeros_like(x)], dim=-3)


def _check_finite(x):
    if not torch.isfinite(x).all():
        raise ValidationError("input contains non-finite values")


def fft2c(x):
    """Orthonormal 2-D FFT with the zero frequency at the grid centre."""
    _check_finite(x)
    z = torch.fft.ifftshift(to_complex(x), dim=(-2, -1))
    z = torch.fft.fft2(z, norm="ortho")
    return to_channels(torch.fft.fftshift(z, dim=(-2, -1)))


def ifft2c(k):
    _check_finite(k)
    z = torch.fft.ifftshift(to_complex(k), dim=(-2, -1))
    z = torch.fft.ifft2(z, norm="ortho")
    return to_channels(torch.fft.fftshift(z, dim=(-2, -1)))


@dataclass
class SamplingMask:
    scheme: str
    ratio: float
    keep: np.ndarray
    seed: int

    @property
    def shape(self):
        return self.keep.shape

    @property
    def fraction(self):
        return float(self.keep.mean())

    def kept_columns(self):
        return np.flatnonzero(self.keep.all(axis=0))

    def tensor(self, dtype=torch.float32):
        """Mask as a ``(1, 1, H, W)`` float tensor that broadcasts over channels."""
        return torch.from_numpy(self.keep.astype(np.float64)).to(dtype)[None, None]

    def within_tolerance(self):
        tol = 0.05 if self.scheme == "radial" else 0.02
        return abs(self.fraction - self.ratio) <= tol * self.ratio


def center_block(width, n_keep):
    """Column indices of the fully sampled low-frequency block.

    The block holds ``max(1, floor(0.32 * n_keep))`` columns around ``width // 2``
    (the zero-frequency column); an even-sized block extends one extra column
    to the left.
    """
    n_center = max(1, int(math.floor(CENTER_SHARE * n_keep)))
    start = width // 2 - n_center // 2
    return np.arange(start, start + n_center)


def _column_mask(scheme, ratio, height, width, rng):
    n_keep = min(width, max(1, int(round(ratio * width))))
    center = center_block(width, n_keep)
    outer = np.setdiff1d(np.arange(width), center)
    n_rest = n_keep - center.size
    if n_rest <= 0:
        chosen = np.array([], dtype=int)
    elif scheme == "random":
        chosen = rng.choice(outer, size=n_rest, replace=False)
    else:
        stride = outer.size / n_rest
        offset = rng.uniform(0.0, 1.0)
        chosen = outer[np.floor((np.arange(n_rest) + offset) * stride).astype(int)]
    cols = np.zeros(width, dtype=bool)
    cols[center] = True
    cols[chosen] = True
    return np.broadcast_to(cols, (height, width)).copy()


def _radial_mask(ratio, height, width):
    n_lines = int(math.ceil(ratio * max(height, width) * math.pi / 2))
    cy, cx = height // 2, width // 2
    radius = math.hypot(height, width) / 2
    t = np.arange(-radius, radius + 0.25, 0.5)
    keep = np.zeros((height, width), dtype=bool)
    for k in range(n_lines):
        theta = math.pi * k / n_lines
        ys = np.rint(cy + t * math.sin(theta)).astype(int)
        xs = np.rint(cx + t * math.cos(theta)).astype(int)
        ok = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
        keep[ys[ok], xs[ok]] = True
    target = int(round(ratio * height * width))
    if abs(keep.sum() - target) > 0.05 * ratio * height * width:
        # trim the outermost samples or pad the innermost missing ones
        yy, xx = np.meshgrid(np.arange(height) - cy, np.arange(width) - cx, indexing="ij")
        dist = np.hypot(yy, xx).ravel()
        flat = keep.ravel()
        if flat.sum() > target:
            idx = np.flatnonzero(flat)
            drop = idx[np.argsort(-dist[idx], kind="stable")][: flat.sum() - target]
            flat[drop] = False
        else:
            idx = np.flatnonzero(~flat)
            add = idx[np.argsort(dist[idx], kind="stable")][: target - flat.sum()]
            flat[add] = True
        keep = flat.reshape(height, width)
    return keep


def make_mask(scheme, ratio, height, width, seed=0):
    """Build a k-space sampling mask.

    ``random`` and ``equispaced`` keep whole columns (phase-encode lines) and
    always include the central low-frequency block from :func:`center_block`.
    ``radial`` keeps the grid samples nearest to equiangular diameters.
    """
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown sampling scheme {scheme!r}; choose from {SCHEMES}")
    if not 0 < ratio <= 1:
        raise ValidationError(f"sampling ratio must lie in (0, 1], got {ratio}")
    if height < 1 or width < 1:
        raise ValidationError("mask dimensions must be positive")
    if ratio == 1:
        keep = np.ones((height, width), dtype=bool)
    elif scheme == "radial":
        keep = _radial_mask(ratio, height, width)
    else:
        keep = _column_mask(scheme, ratio, height, width, np.random.default_rng(seed))
    return SamplingMask(scheme=scheme, ratio=float(ratio), keep=keep, seed=int(seed))


def _mask_tensor(mask, like):
    m = mask.tensor(like.dtype) if isinstance(mask, SamplingMask) else torch.as_tensor(mask, dtype=like.dtype)
    if m.shape[-2:] != like.shape[-2:]:
        raise ValidationError(f"mask {tuple(m.shape[-2:])} does not match image {tuple(like.shape[-2:])}")
    return m


def undersample(x, mask):
    """Zero-filled image ``ifft2c(mask * fft2c(x))``."""
    m = _mask_tensor(mask, x)
    return ifft2c(fft2c(x) * m)


def data_consistency(current, measured_kspace, mask):
    """Replace the k-space of ``current`` by ``measured_kspace`` at kept samples."""
    if current.shape != measured_kspace.shape:
        raise ValidationError(f"shape mismatch: {tuple(current.shape)} vs {tuple(measured_kspace.shape)}")
    m = _mask_tensor(mask, current)
    k = fft2c(current)
    return ifft2c(m * measured_kspace + (1 - m) * k)
