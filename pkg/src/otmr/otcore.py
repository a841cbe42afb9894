"""Optimal-transport pieces: discrete W1 solvers, dual adversarial losses and
the reconstruction/synthesis error-bound harness."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import CapacityError, ConvergenceError, ValidationError

MAX_EXACT_SUPPORT = 256


@dataclass
class DiscreteMeasure:
    """Weighted point cloud in R^d (d <= 2)."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.support, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if s.ndim != 2 or s.shape[1] > 2 or s.shape[0] != w.size:
            raise ValidationError(f"support {s.shape} and weights {w.shape} are inconsistent")
        if not (np.isfinite(s).all() and np.isfinite(w).all()):
            raise ValidationError("measure contains non-finite values")
        if (w < 0).any():
            raise ValidationError("measure weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"measure weights sum to {w.sum()!r}, expected 1")
        self.support, self.weights = s, w

    def __len__(self):
        return self.weights.size

    @classmethod
    def dirac(cls, point):
        return cls(np.atleast_2d(np.asarray(point, dtype=np.float64)), [1.0])

    @classmethod
    def from_image(cls, img, max_grid=None):
        """Normalized intensity mass on pixel centres (coordinates in pixels).

        With ``max_grid`` the image is block-averaged until each side has at
        most ``max_grid`` cells; block centres keep original pixel units.
        """
        a = np.asarray(img, dtype=np.float64)
        if a.ndim != 2:
            raise ValidationError("from_image expects a 2-D magnitude image")
        if (a < 0).any():
            raise ValidationError("image intensities must be non-negative to form a measure")
        coords_y, coords_x = np.arange(a.shape[0], dtype=float), np.arange(a.shape[1], dtype=float)
        if max_grid is not None:
            a, coords_y, coords_x = _block_reduce(a, max_grid)
        mass = a.sum()
        if not mass > 0:
            raise ValidationError("image has zero mass; cannot normalize to a probability measure")
        yy, xx = np.meshgrid(coords_y, coords_x, indexing="ij")
        support = np.stack([yy.ravel(), xx.ravel()], axis=1)
        return cls(support, (a / mass).ravel())


def _block_reduce(a, max_grid):
    h, w = a.shape
    fy, fx = math.ceil(h / max_grid), math.ceil(w / max_grid)
    ny, nx = math.ceil(h / fy), math.ceil(w / fx)
    sums = np.pad(a, ((0, ny * fy - h), (0, nx * fx - w))).reshape(ny, fy, nx, fx).sum(axis=(1, 3))
    cy = np.array([np.arange(i * fy, min((i + 1) * fy, h)).mean() for i in range(ny)])
    cx = np.array([np.arange(j * fx, min((j + 1) * fx, w)).mean() for j in range(nx)])
    return sums, cy, cx


def _trimmed(mu):
    keep = mu.weights > 0
    return mu.support[keep], mu.weights[keep] / mu.weights[keep].sum()


def cost_matrix(x, y):
    return np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))


def exact_w1(mu, nu):
    """Exact 1-Wasserstein distance with Euclidean ground cost.

    Solves the transportation LP by dual simplex (HiGHS), so the optimum is
    attained at a vertex of the transport polytope.
    """
    if len(mu) > MAX_EXACT_SUPPORT or len(nu) > MAX_EXACT_SUPPORT:
        raise CapacityError(f"exact_w1 accepts at most {MAX_EXACT_SUPPORT} support points per measure")
    if mu.support.shape[1] != nu.support.shape[1]:
        raise ValidationError("measures live in different dimensions")
    xs, a = _trimmed(mu)
    ys, b = _trimmed(nu)
    n, m = a.size, b.size
    c = cost_matrix(xs, ys)
    if n == 1 or m == 1:
        return float((c * (b[None, :] if n == 1 else a[:, None])).sum())
    rows = sp.kron(sp.eye(n), np.ones((1, m)))
    cols = sp.kron(np.ones((1, n)), sp.eye(m))
    a_eq = sp.vstack([rows, cols]).tocsr()
    res = linprog(c.ravel(), A_eq=a_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise ConvergenceError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x, 0.0)
    return float(plan @ c.ravel())


def _round_to_marginals(plan, a, b):
    # project an approximate plan onto the exact transport polytope
    x = np.minimum(a / np.maximum(plan.sum(1), 1e-300), 1.0)
    plan = plan * x[:, None]
    y = np.minimum(b / np.maximum(plan.sum(0), 1e-300), 1.0)
    plan = plan * y[None, :]
    ea, eb = a - plan.sum(1), b - plan.sum(0)
    if ea.sum() > 0:
        plan = plan + np.outer(ea, eb) / ea.sum()
    return plan


def sinkhorn_w1(mu, nu, epsilon, max_iter=100_000, tol=1e-6):
    """Transport cost of the entropic-regularized W1 plan (log-domain Sinkhorn).

    Iterates until the row-marginal L1 violation drops below ``tol``, rounds
    the plan onto the exact marginals and returns ``<plan, cost>``.
    """
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    xs, a = _trimmed(mu)
    ys, b = _trimmed(nu)
    c = cost_matrix(xs, ys)
    la, lb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    err = math.inf
    for it in range(max_iter):
        f = -epsilon * logsumexp((g[None, :] - c) / epsilon + lb[None, :], axis=1)
        g = -epsilon * logsumexp((f[:, None] - c) / epsilon + la[:, None], axis=0)
        if it % 10 == 0 or it == max_iter - 1:
            plan = np.exp((f[:, None] + g[None, :] - c) / epsilon + la[:, None] + lb[None, :])
            err = np.abs(plan.sum(1) - a).sum()
            if err < tol:
                break
    else:
        raise ConvergenceError(f"Sinkhorn did not converge in {max_iter} iterations (residual {err:.3e})", err)
    plan = _round_to_marginals(plan, a, b)
    return float((plan * c).sum())


# --- dual adversarial losses ------------------------------------------------


@dataclass
class DualLossReport:
    """Values of one min-max OT problem on a mini-batch.

    ``critic_objective`` is what the critic maximizes,
    ``generator_objective`` what the transport map minimizes.
    """

    critic_objective: torch.Tensor
    generator_objective: torch.Tensor
    transport_cost_term: torch.Tensor

    def __post_init__(self):
        for name in ("critic_objective", "generator_objective", "transport_cost_term"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValidationError(f"{name} is not finite")

    def as_floats(self):
        return {
            "critic_objective": float(self.critic_objective),
            "generator_objective": float(self.generator_objective),
            "transport_cost_term": float(self.transport_cost_term),
        }


def l1_cost(x, y):
    """Per-pixel mean absolute difference, averaged over the batch."""
    if x.shape[1] != y.shape[1]:
        # one-channel magnitude against a two-channel complex tensor
        x, y = _lift(x), _lift(y)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().flatten(1).mean(1).mean()


def _lift(x):
    return torch.cat([x, torch.zeros_like(x)], dim=1) if x.shape[1] == 1 else x


def dual_report(critic, generated, real, cost_reference, cost_weight=1.0):
    """Empirical Kantorovich dual with the c-transform ``psi^c = -psi``.

    ``critic_objective = mean psi(generated) - mean psi(real)`` and
    ``generator_objective = mean psi(generated) + cost_weight * c``, where
    ``c`` is the mean L1 cost between ``generated`` and ``cost_reference``.
    """
    if generated.shape[0] == 0 or real.shape[0] == 0:
        raise ValidationError("batches must be non-empty")
    if generated.shape[1:] != real.shape[1:]:
        raise ValidationError(f"generated {tuple(generated.shape)} and real {tuple(real.shape)} differ")
    psi_gen = critic(generated).mean()
    psi_real = critic(real).mean()
    cost = l1_cost(generated, cost_reference)
    return DualLossReport(
        critic_objective=psi_gen - psi_real,
        generator_objective=psi_gen + cost_weight * cost,
        transport_cost_term=cost,
    )


def _aligned(out):
    return out[-1] if isinstance(out, tuple) else out


def dual_losses_alignment(critic, align, synthesize, batch_t1, batch_t2r, batch_t2, cost="paired", cost_weight=1.0):
    """Dual losses of the alignment problem, transport map ``synthesize o align``.

    ``cost="paired"`` charges the L1 distance between each generated image and
    its paired target-modality sample; ``cost="source"`` charges the distance
    to the input ``batch_t1`` itself.
    """
    if not (batch_t1.shape[0] == batch_t2r.shape[0] == batch_t2.shape[0]):
        raise ValidationError("alignment batches must have equal length")
    generated = synthesize(_aligned(align(batch_t1, batch_t2r)))
    ref = batch_t2 if cost == "paired" else batch_t1
    return dual_report(critic, generated, batch_t2, ref, cost_weight)


def dual_losses_synthesis(critic, synthesize, batch_t1a, batch_t2, cost="paired", cost_weight=1.0):
    """Dual losses of the synthesis problem with transport map ``synthesize``."""
    if batch_t1a.shape[0] != batch_t2.shape[0]:
        raise ValidationError("synthesis batches must have equal length")
    generated = synthesize(batch_t1a)
    ref = batch_t2 if cost == "paired" else batch_t1a
    return dual_report(critic, generated, batch_t2, ref, cost_weight)


# --- error-bound harness ----------------------------------------------------


def verify_theorem1(x_r, x_g, x_t2, region_diameter=None, max_grid=16):
    """Evaluate ``|x_r - x_g|_1 <= |x_r - x_t2|_1 + C * W1(x_g, x_t2)``.

    L1 terms are pixel sums on the raw magnitude images. The W1 term compares
    ``x_g`` and ``x_t2`` as normalized intensity measures on a grid of at most
    ``max_grid`` cells per side, with pixel-unit Euclidean ground cost and
    ``C = 1 / region_diameter`` (default: the image diagonal in pixels).
    Returns a dict record; the bound itself is reported, not asserted.
    """
    x_r, x_g, x_t2 = (np.asarray(getattr(v, "data", v), dtype=np.float64).squeeze() for v in (x_r, x_g, x_t2))
    if not (x_r.shape == x_g.shape == x_t2.shape) or x_r.ndim != 2:
        raise ValidationError("theorem harness expects three 2-D images of equal shape")
    h, w = x_t2.shape
    diam = math.hypot(h - 1, w - 1) if region_diameter is None else float(region_diameter)
    if not diam > 0:
        raise ValidationError("region diameter must be positive")
    for name, img in (("x_g", x_g), ("x_t2", x_t2)):
        if not np.abs(img).sum() > 0:
            raise ValidationError(f"{name} has zero mass")
    lhs = float(np.abs(x_r - x_g).sum())
    rec = float(np.abs(x_r - x_t2).sum())
    gen_l1 = float(np.abs(x_g - x_t2).sum())
    w1 = exact_w1(
        DiscreteMeasure.from_image(np.abs(x_g), max_grid), DiscreteMeasure.from_image(np.abs(x_t2), max_grid)
    )
    c = 1.0 / diam
    return {
        "lhs": lhs,
        "rec_l1": rec,
        "gen_l1": gen_l1,
        "w1": w1,
        "C": c,
        "diameter": diam,
        "rhs": rec + c * w1,
        "w1_term": c * w1,
        "triangle_slack": lhs - rec - gen_l1,
        "w1_l1_ratio": w1 / gen_l1 if gen_l1 > 0 else math.nan,
        "holds": bool(lhs <= rec + c * w1),
    }


def summarize_theorem(records):
    n = len(records)
    return {
        "n_samples": n,
        "max_triangle_slack": max(r["triangle_slack"] for r in records) if n else math.nan,
        "fraction_holds": sum(r["holds"] for r in records) / n if n else math.nan,
        "C": records[0]["C"] if n else math.nan,
    }
