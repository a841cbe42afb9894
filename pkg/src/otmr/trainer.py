"""Alternating training of reconstruction, alignment, synthesis and critics.

One :func:`train_step` runs a global update of the reconstruction network and
of the composed synthesis map on the weighted objective, then ``inner_iters``
rounds that refine the synthesis map, its critic, the alignment generator and
its critic in turn.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import metrics
from .errors import NumericError, ValidationError
from .imageio import DatasetManifest, load_split
from .kspace import fft2c, ifft2c, magnitude, make_mask, real_to_complex
from .nets import (
    NetSpec,
    ModelState,
    init_state,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .otcore import dual_report, l1_cost
from .warp import DeformationField, endpoint_error, smoothness_loss

log = logging.getLogger(__name__)

ABLATIONS = ("full", "without_cms", "without_isa")
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    alpha: float = 3000.0
    beta: float = 1.0
    delta: float = 1.0
    eta: float = 1000.0
    lr: float = 1e-4
    inner_iters: int = 1
    critic_steps_per_update: int = 1
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    ablation: str = "full"
    mask_scheme: str = "random"
    mask_ratio: float = 0.25
    transport_cost: str = "paired"
    reg_reduction: str = "mean"
    checkpoint_every: int = 0
    convergence_window: int = 100
    convergence_tol: float = 1e-4
    net: NetSpec = field(default_factory=NetSpec)

    def validate(self):
        for name in ("alpha", "beta", "delta", "eta"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")
        if self.lr < 0:
            raise ValidationError("learning rate must be >= 0")
        if self.inner_iters < 1 or self.critic_steps_per_update < 1:
            raise ValidationError("inner_iters and critic_steps_per_update must be >= 1")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValidationError("batch_size must be >= 1 and max_steps >= 0")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.transport_cost not in ("paired", "source"):
            raise ValidationError("transport_cost must be 'paired' or 'source'")
        if self.reg_reduction not in ("sum", "mean"):
            raise ValidationError("reg_reduction must be 'sum' or 'mean'")
        self.net.validate()
        return self

    def effective_weights(self):
        """Loss weights after the ablation switch is applied."""
        if self.ablation == "without_cms":
            return self.alpha, 0.0, 0.0, 0.0
        if self.ablation == "without_isa":
            return self.alpha, self.beta, self.delta, 0.0
        return self.alpha, self.beta, self.delta, self.eta

    def to_dict(self):
        d = asdict(self)
        d["net"] = asdict(self.net)
        return d

    @classmethod
    def from_dict(cls, d, strict=True):
        """Build from a mapping; with ``strict`` every field must be present."""
        names = [f.name for f in fields(cls)]
        unknown = set(d) - set(names)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if strict:
            missing = [n for n in names if n not in d]
            if missing:
                raise ValidationError(f"missing config key: {missing[0]}", )
        kw = dict(d)
        if "net" in kw:
            net = kw["net"] or {}
            if strict:
                missing = [f.name for f in fields(NetSpec) if f.name not in net]
                if missing:
                    raise ValidationError(f"missing config key: net.{missing[0]}")
            kw["net"] = NetSpec.from_dict(net)
        return cls(**kw).validate()

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path):
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError(f"config {path} must be a key-value mapping")
        return cls.from_dict(doc)


def toy_config(**overrides):
    """Desk-scale settings used by the end-to-end checks (32x32 phantoms)."""
    cfg = TrainConfig(
        eta=0.03,
        lr=3e-3,
        batch_size=8,
        max_steps=1500,
        net=NetSpec(
            depth=2, base_channels=8, cascades=2, critic_channels=8, field_stride=8, synthesis="pointwise"
        ),
    )
    net = overrides.pop("net", None)
    if net is not None:
        cfg.net = net
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ValidationError(f"unknown config key {k!r}")
        setattr(cfg, k, v)
    return cfg.validate()


# --- batches ------------------------------------------------------------------


@dataclass
class Batch:
    t1: torch.Tensor  # (B, 1, H, W) auxiliary magnitude
    t2: torch.Tensor  # (B, 2, H, W) fully sampled target, complex layout
    kspace: torch.Tensor  # (B, 2, H, W) measured (masked) k-space
    x_under: torch.Tensor  # (B, 2, H, W) zero-filled image
    mask: torch.Tensor  # (1, 1, H, W)

    def __len__(self):
        return self.t1.shape[0]


def make_batch(t1, t2, mask, dtype=torch.float32):
    """Simulate acquisition for magnitude arrays ``t1``, ``t2`` of shape (B, H, W)."""
    t1 = torch.as_tensor(np.asarray(t1), dtype=dtype)[:, None]
    t2c = real_to_complex(torch.as_tensor(np.asarray(t2), dtype=dtype)[:, None])
    m = mask.tensor(dtype) if hasattr(mask, "tensor") else torch.as_tensor(mask, dtype=dtype)
    k = fft2c(t2c) * m
    return Batch(t1=t1, t2=t2c, kspace=k, x_under=ifft2c(k), mask=m)


# --- forward pass and losses --------------------------------------------------


@dataclass
class Forward:
    x_r: torch.Tensor
    field: torch.Tensor | None = None
    x_a: torch.Tensor | None = None
    x_g: torch.Tensor | None = None
    guide: torch.Tensor | None = None


def _trace(hook, event):
    if hook is not None:
        hook(event)


def forward_pipeline(state, batch, ablation="full", hook=None, guide=None):
    """Reconstruct, align and synthesize for one batch.

    The reconstruction network is guided by a pilot synthesis computed from
    the auxiliary image aligned to the zero-filled input; the alignment and
    synthesis that enter the losses then use the reconstruction itself. The
    guide is a conditioning input only: no gradient flows from the
    reconstruction loss back into the alignment or synthesis parameters. A
    precomputed ``guide`` may be passed to hold it fixed.
    """
    if ablation == "without_cms":
        _trace(hook, "reconstruct")
        return Forward(x_r=state.theta(batch.x_under, batch.kspace, batch.mask))
    if ablation == "without_isa":
        x_g = state.m(batch.t1)
        _trace(hook, "reconstruct")
        x_r = state.theta(batch.x_under, batch.kspace, batch.mask, guide=x_g.detach())
        _trace(hook, "align")
        _trace(hook, "synthesize")
        return Forward(x_r=x_r, field=torch.zeros_like(batch.x_under), x_a=batch.t1, x_g=x_g, guide=x_g.detach())
    if guide is None:
        with torch.no_grad():
            _, pilot_a = state.s(batch.t1, batch.x_under)
            guide = state.m(pilot_a)
    _trace(hook, "reconstruct")
    x_r = state.theta(batch.x_under, batch.kspace, batch.mask, guide=guide)
    _trace(hook, "align")
    fld, x_a = state.s(batch.t1, x_r)
    _trace(hook, "synthesize")
    x_g = state.m(x_a)
    return Forward(x_r=x_r, field=fld, x_a=x_a, x_g=x_g, guide=guide)


def reconstruct_batch(state, batch, ablation="full"):
    with torch.no_grad():
        return forward_pipeline(state, batch, ablation)


def _losses(state, batch, fwd, cfg):
    alpha, beta, delta, eta = cfg.effective_weights()
    zero = fwd.x_r.new_zeros(())
    l_rec = l1_cost(fwd.x_r, batch.t2)
    comp = {"L_rec": l_rec, "L_g": zero, "L_otm": zero, "L_reg": zero}
    if cfg.ablation != "without_cms":
        ref_src = batch.t1 if cfg.transport_cost == "source" else batch.t2
        rep_g = dual_report(state.gamma, fwd.x_g, batch.t2, ref_src)
        ref_syn = fwd.x_a if cfg.transport_cost == "source" else batch.t2
        rep_m = dual_report(state.omega, fwd.x_g, batch.t2, ref_syn)
        comp["L_g"] = rep_g.generator_objective
        comp["L_otm"] = rep_m.generator_objective
        if cfg.ablation == "full":
            comp["L_reg"] = smoothness_loss(fwd.field, fwd.x_a, reduction=cfg.reg_reduction)
    total = alpha * comp["L_rec"] + beta * comp["L_g"] + delta * comp["L_otm"] + eta * comp["L_reg"]
    return total, comp


def total_loss(state, batch, cfg, fwd=None):
    """Weighted objective and its components for one batch.

    Returns ``(total, components)`` where components holds the unweighted
    ``L_rec``, ``L_g``, ``L_otm`` and ``L_reg`` tensors.
    """
    if fwd is None:
        fwd = forward_pipeline(state, batch, cfg.ablation)
    total, comp = _losses(state, batch, fwd, cfg)
    for name, v in comp.items():
        if not torch.isfinite(v):
            raise NumericError(f"loss component {name} is not finite", {name: float(v)})
    return total, comp


# --- optimization -------------------------------------------------------------


def make_optimizers(state, cfg):
    return {
        name: torch.optim.Adam(state.bundle(name).parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.0)
        for name in ("theta", "s", "m", "gamma", "omega")
    }


def _zero(state):
    for mod in state.bundles().values():
        mod.zero_grad(set_to_none=True)


def _critic_step(critic, opt, real, fake, steps):
    critic.train()
    obj = None
    for _ in range(steps):
        critic.zero_grad(set_to_none=True)
        # the critic maximizes mean psi(fake) - mean psi(real)
        loss = critic(real).mean() - critic(fake).mean()
        loss.backward()
        opt.step()
        obj = -float(loss.detach())
    critic.eval()
    return obj


def _check_record(rec):
    for key, v in rec.items():
        if isinstance(v, float) and (math.isnan(v) or abs(v) > DIVERGENCE_LIMIT):
            raise NumericError(f"training diverged at step {rec['step']}: {key}={v}", rec)


def train_step(state, batch, cfg, optimizers, hook=None):
    """One iteration of the alternating scheme; mutates ``state`` in place.

    Returns the log record for this step. ``hook`` receives event names in
    execution order.
    """
    state.theta.train()
    state.s.train()
    state.m.train()
    state.gamma.eval()
    state.omega.eval()
    ab = cfg.ablation

    # global update of theta and of the composed synthesis map (s, m)
    _zero(state)
    fwd = forward_pipeline(state, batch, ab, hook)
    total, comp = total_loss(state, batch, cfg, fwd)
    _trace(hook, "losses")
    rec = {"step": state.step, **{k: float(v.detach()) for k, v in comp.items()}, "total": float(total.detach())}
    rec["l1_gap"] = float(l1_cost(fwd.x_r, fwd.x_g).detach()) if fwd.x_g is not None else None
    _check_record(rec)
    total.backward()
    optimizers["theta"].step()
    _trace(hook, "update_theta")
    if ab != "without_cms":
        optimizers["m"].step()
        if ab == "full":
            optimizers["s"].step()
        _trace(hook, "update_phi")

    if ab != "without_cms":
        _, beta, _, eta = cfg.effective_weights()
        t1, t2 = batch.t1, batch.t2
        x_r = fwd.x_r.detach()
        x_a = fwd.x_a.detach()
        x_g = fwd.x_g.detach()
        cost_ref = t2
        for _ in range(cfg.inner_iters):
            _zero(state)
            gen = state.m(x_a)
            rep = dual_report(state.omega, gen, t2, x_a if cfg.transport_cost == "source" else cost_ref)
            rep.generator_objective.backward()
            optimizers["m"].step()
            _trace(hook, "update_m")
            rec["critic_omega"] = _critic_step(state.omega, optimizers["omega"], t2, x_g, cfg.critic_steps_per_update)
            _trace(hook, "update_omega")
            with torch.no_grad():
                x_g_half = state.m(x_a)
            _trace(hook, "regen_g_half")
            if ab == "full":
                _zero(state)
                # the generator also sees the zero-filled input, as it does for the pilot guide
                f_new, a_new = state.s(torch.cat([t1, t1]), torch.cat([x_r, batch.x_under]))
                ref = torch.cat([t1, t1] if cfg.transport_cost == "source" else [cost_ref, cost_ref])
                rep = dual_report(state.gamma, state.m(a_new), torch.cat([t2, t2]), ref)
                # the alignment generator carries its share of the weighted objective
                obj = beta * rep.generator_objective + eta * smoothness_loss(f_new, a_new, reduction=cfg.reg_reduction)
                obj.backward()
                optimizers["s"].step()
                _trace(hook, "update_s")
                rec["critic_gamma"] = _critic_step(
                    state.gamma, optimizers["gamma"], t2, x_g_half, cfg.critic_steps_per_update
                )
                _trace(hook, "update_gamma")
                with torch.no_grad():
                    _, x_a = state.s(t1, x_r)
                _trace(hook, "regen_a")
            with torch.no_grad():
                x_g = state.m(x_a)
            _trace(hook, "regen_g")
    _zero(state)
    state.step += 1
    return rec


# --- fitting ------------------------------------------------------------------


@dataclass
class TrainLog:
    """Append-only list of step and validation records."""

    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and "step" in rec:
            last = self.records[-1]["step"]
            if rec["step"] < last or (rec["step"] == last and rec.get("kind") == self.records[-1].get("kind")):
                raise ValidationError("TrainLog step index must be monotone")
        self.records.append(rec)

    def steps(self):
        return [r for r in self.records if r.get("kind") == "step"]

    def validations(self):
        return [r for r in self.records if r.get("kind") == "val"]

    def lines(self):
        return [json.dumps(_json_safe(r), sort_keys=True) for r in self.records]

    def save(self, path):
        Path(path).write_text("".join(line + "\n" for line in self.lines()))

    @classmethod
    def load(cls, path):
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])


def _json_safe(rec):
    out = {}
    for k, v in rec.items():
        if isinstance(v, float) and not math.isfinite(v):
            out[k] = "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
        else:
            out[k] = v
    return out


@dataclass
class Dataset:
    t1: np.ndarray
    t2: np.ndarray
    fields: list

    def __len__(self):
        return self.t1.shape[0]


def load_dataset(manifest, split):
    t1, t2, flds = load_split(manifest, split)
    return Dataset(t1, t2, flds)


def evaluate_split(state, data, mask, ablation="full", batch_size=16, peak=1.0):
    """Metrics of the zero-filled input and of the model on ``data``.

    Returns ``(zero_filled_report, model_report, extras)`` where extras holds
    per-sample L1 gaps, endpoint errors and output images.
    """
    zf = metrics.MetricReport("Zero-filling")
    model = metrics.MetricReport("OT-Based" if ablation == "full" else ablation)
    extras = {"l1_gap": [], "epe": [], "epe_zero": [], "x_r": [], "x_g": [], "field": []}
    state.eval()
    for lo in range(0, len(data), batch_size):
        sl = slice(lo, lo + batch_size)
        batch = make_batch(data.t1[sl], data.t2[sl], mask)
        fwd = reconstruct_batch(state, batch, ablation)
        x_r = magnitude(fwd.x_r)[:, 0].numpy()
        x_u = magnitude(batch.x_under)[:, 0].numpy()
        for j in range(len(batch)):
            idx = lo + j
            zf.add(idx, data.t2[idx], x_u[j], peak)
            model.add(idx, data.t2[idx], x_r[j], peak)
            extras["x_r"].append(x_r[j])
            if fwd.x_g is not None:
                x_g = magnitude(fwd.x_g[j : j + 1])[0, 0].numpy()
                extras["x_g"].append(x_g)
                extras["l1_gap"].append(float(l1_cost(fwd.x_r[j : j + 1], fwd.x_g[j : j + 1])))
            if fwd.field is not None:
                est = DeformationField.from_tensor(fwd.field[j])
                extras["field"].append(est)
                true = data.fields[idx] if data.fields else None
                if true is not None:
                    extras["epe"].append(endpoint_error(est, true))
                    extras["epe_zero"].append(endpoint_error(DeformationField.zeros(*true.shape), true))
    return zf, model, extras


def _validation_record(state, data, mask, cfg, epoch):
    zf, model, extras = evaluate_split(state, data, mask, cfg.ablation)
    s = model.summary()
    rec = {
        "kind": "val",
        "step": state.step,
        "epoch": epoch,
        "psnr": s["psnr_mean"],
        "ssim": s["ssim_mean"],
        "nmse": s["nmse_mean"],
        "psnr_zero_filled": zf.summary()["psnr_mean"],
        "l1_gap": float(np.mean(extras["l1_gap"])) if extras["l1_gap"] else None,
    }
    if extras["epe"]:
        rec["epe"] = float(np.mean(extras["epe"]))
    return rec


def _converged(totals, window, tol):
    if len(totals) < 2 * window:
        return False
    prev = float(np.mean(totals[-2 * window : -window]))
    last = float(np.mean(totals[-window:]))
    return abs(last - prev) <= tol * abs(prev)


def _batch_indices(n, batch_size, seed, step):
    per_epoch = math.ceil(n / batch_size)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[b * batch_size : (b + 1) * batch_size], epoch, b == per_epoch - 1


def fit(dataset, cfg, out_dir=None, resume=None, hook=None, data=None):
    """Run the alternating scheme until ``max_steps`` or convergence.

    ``dataset`` is a :class:`DatasetManifest` (or ``data`` may supply
    pre-loaded ``{"train": Dataset, "val": Dataset}``). Validation metrics and
    the reconstruction/synthesis L1 gap are logged at the end of every epoch.
    With ``out_dir`` checkpoints are written every ``checkpoint_every`` steps
    and at the end. ``resume`` is a checkpoint path to continue from.

    On divergence a :class:`NumericError` is raised whose ``record`` carries the
    diagnostic, the partial log and the last good checkpoint path.
    """
    cfg.validate()
    if data is None:
        data = {"train": load_dataset(dataset, "train"), "val": load_dataset(dataset, "val")}
    train, val = data["train"], data.get("val")
    if len(train) == 0:
        raise ValidationError("training split is empty")
    h, w = train.t1.shape[1:]
    cfg.net.validate(image_size=min(h, w))
    mask = make_mask(cfg.mask_scheme, cfg.mask_ratio, h, w, seed=cfg.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    log_ = TrainLog()
    if resume:
        state, meta, optim_arrays = load_checkpoint(resume)
        optimizers = make_optimizers(state, cfg)
        for name, opt in optimizers.items():
            restore_optimizer(opt, name, meta, optim_arrays)
        log_.records = list(meta.get("extra", {}).get("log", []))
    else:
        state = init_state(cfg.net, cfg.seed)
        optimizers = make_optimizers(state, cfg)
    last_good = None
    totals = [r["total"] for r in log_.steps()]

    def checkpoint(tag):
        if out is None:
            return None
        path = out / f"checkpoint_{tag}.npz"
        save_checkpoint(path, state, optimizers, extra={"config": cfg.to_dict(), "log": log_.records})
        return path

    torch.use_deterministic_algorithms(True)
    t0 = time.perf_counter()
    while state.step < cfg.max_steps:
        idx, epoch, epoch_end = _batch_indices(len(train), cfg.batch_size, cfg.seed, state.step)
        idx = np.sort(idx)
        batch = make_batch(train.t1[idx], train.t2[idx], mask)
        try:
            rec = train_step(state, batch, cfg, optimizers, hook)
        except NumericError as exc:
            diag = {"kind": "diverged", "step": state.step, "error": str(exc), "last_good": str(last_good)}
            log_.append(diag)
            exc.record = {"diagnostic": diag, "log": log_, "last_good": last_good}
            raise
        rec["kind"] = "step"
        rec["epoch"] = epoch
        log_.append(rec)
        totals.append(rec["total"])
        if epoch_end and val is not None and len(val):
            log_.append(_validation_record(state, val, mask, cfg, epoch))
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            last_good = checkpoint(f"{state.step:06d}")
        if _converged(totals, cfg.convergence_window, cfg.convergence_tol):
            log.info("converged at step %d", state.step)
            break
    log.info("trained %d steps in %.1fs", state.step, time.perf_counter() - t0)
    if out is not None:
        checkpoint("final")
        log_.save(out / "train_log.jsonl")
    return state, log_
