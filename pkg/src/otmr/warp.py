"""Displacement fields, bilinear resampling and the edge-aware smoothness penalty.

Tensors follow the ``(batch, channels, height, width)`` layout. A displacement
field is a two-channel tensor ``(dx, dy)`` in pixel units: ``dx`` moves along
the width axis, ``dy`` along the height axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError


@dataclass
class DeformationField:
    """Per-pixel displacement in pixels, stored as two ``(H, W)`` grids."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx)
        self.dy = np.asarray(self.dy)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValidationError(f"dx/dy must be matching 2-D grids, got {self.dx.shape} and {self.dy.shape}")
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise ValidationError("deformation field contains non-finite values")

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def from_tensor(cls, field):
        """Build from a ``(2, H, W)`` or ``(1, 2, H, W)`` tensor."""
        field = field.detach().cpu()
        if field.ndim == 4:
            field = field[0]
        return cls(field[0].numpy().copy(), field[1].numpy().copy())

    @property
    def shape(self):
        return self.dx.shape

    def magnitude(self):
        return np.hypot(self.dx, self.dy)

    def max_magnitude(self):
        return float(self.magnitude().max()) if self.dx.size else 0.0

    def to_tensor(self, dtype=torch.float32):
        return torch.from_numpy(np.stack([self.dx, self.dy])).to(dtype).unsqueeze(0)

    def to_array(self):
        return np.stack([self.dx, self.dy]).astype(np.float32)


def endpoint_error(estimate, reference):
    """Mean Euclidean distance between two displacement fields."""
    if estimate.shape != reference.shape:
        raise ValidationError(f"field shapes differ: {estimate.shape} vs {reference.shape}")
    return float(np.mean(np.hypot(estimate.dx - reference.dx, estimate.dy - reference.dy)))


def _check_pair(img, field):
    if img.ndim != 4 or field.ndim != 4:
        raise ValidationError("expected (B, C, H, W) tensors")
    if field.shape[1] != 2:
        raise ValidationError(f"field must have 2 channels, got {field.shape[1]}")
    if img.shape[0] != field.shape[0] or img.shape[-2:] != field.shape[-2:]:
        raise ValidationError(f"image {tuple(img.shape)} and field {tuple(field.shape)} do not match")


def warp_image(img, field):
    """Resample ``img`` at ``p + field(p)`` with bilinear interpolation.

    Samples outside the grid are clamped to the border. The result is linear in
    ``img`` and differentiable with respect to both arguments.
    """
    _check_pair(img, field)
    _, _, h, w = img.shape
    ys = torch.arange(h, dtype=field.dtype, device=field.device)
    xs = torch.arange(w, dtype=field.dtype, device=field.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    sx = gx + field[:, 0]
    sy = gy + field[:, 1]
    # align_corners=True maps -1/+1 onto the centres of the edge pixels
    nx = 2.0 * sx / max(w - 1, 1) - 1.0
    ny = 2.0 * sy / max(h - 1, 1) - 1.0
    grid = torch.stack([nx, ny], dim=-1)
    return F.grid_sample(img.to(field.dtype), grid, mode="bilinear", padding_mode="border", align_corners=True)


def bilateral_weight(va, vb):
    """Edge-stopping weight ``exp(-|va - vb|)``; works on floats and tensors."""
    if isinstance(va, torch.Tensor) or isinstance(vb, torch.Tensor):
        return torch.exp(-torch.abs(torch.as_tensor(va) - torch.as_tensor(vb)))
    return float(np.exp(-abs(float(va) - float(vb))))


def _pair_norm(diff):
    # ||.||_2 over the vector channel with a zero subgradient at coincident vectors
    sq = (diff * diff).sum(dim=1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))


def smoothness_loss(field, guide, reduction="sum"):
    """Guide-weighted total variation of a displacement field.

    Each unordered 4-connected pixel pair ``(a, b)`` contributes
    ``exp(-|guide[a] - guide[b]|) * ||field(a) - field(b)||_2``. ``guide`` is
    the aligned auxiliary image; multi-channel guides are reduced by channel
    mean. ``reduction`` is ``"sum"`` (per-sample sums, then averaged over the
    batch) or ``"mean"`` (additionally divided by the pixel count).
    """
    _check_pair(guide, field)
    g = guide.mean(dim=1, keepdim=True).to(field.dtype)
    dh = field[..., :, 1:] - field[..., :, :-1]
    dv = field[..., 1:, :] - field[..., :-1, :]
    wh = bilateral_weight(g[..., :, 1:], g[..., :, :-1])[:, 0]
    wv = bilateral_weight(g[..., 1:, :], g[..., :-1, :])[:, 0]
    per_sample = (wh * _pair_norm(dh)).flatten(1).sum(1) + (wv * _pair_norm(dv)).flatten(1).sum(1)
    if reduction == "mean":
        per_sample = per_sample / (field.shape[-1] * field.shape[-2])
    elif reduction != "sum":
        raise ValidationError(f"unknown reduction {reduction!r}")
    return per_sample.mean()


def cosine_displacement(height, width, max_disp, rng, order=3):
    """Smooth random field from a low-order 2-D cosine series.

    The peak vector magnitude is scaled to a random value in
    ``[0.6, 1.0] * max_disp``, so ``max_disp == 0`` yields the zero field.
    """
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    comps = []
    for _ in range(2):
        coef = rng.normal(size=(order, order)) / (1.0 + np.add.outer(np.arange(order), np.arange(order)))
        by = np.cos(np.pi * np.outer(np.arange(order), ys))  # (order, H)
        bx = np.cos(np.pi * np.outer(np.arange(order), xs))  # (order, W)
        comps.append(by.T @ coef @ bx)
    dx, dy = comps
    peak = np.hypot(dx, dy).max()
    target = max_disp * rng.uniform(0.6, 1.0)
    scale = target / peak if peak > 0 and max_disp > 0 else 0.0
    return DeformationField(dx * scale, dy * scale)
