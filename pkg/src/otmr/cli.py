"""Command-line entry point: ``otmr <command> [options]``.

Commands
--------
generate-data   write a phantom dataset with a 70/15/15 split
init-config     write a training config (defaults or the desk-scale toy settings)
train           run the alternating training scheme
evaluate        metrics table, per-sample records and figures on the test split
verify-theorem  empirical check of the reconstruction/synthesis L1 bound

Exit codes: 0 success, 2 usage or validation error, 3 runtime or numeric error.
The ``OTMR_WORKERS`` environment variable caps the number of CPU threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics, plotting
from .errors import NumericError, OTMRError, StorageError, ValidationError
from .imageio import DatasetManifest, generate_phantom_pair, write_field, write_raster
from .kspace import SCHEMES, magnitude, make_mask
from .nets import load_checkpoint
from .otcore import summarize_theorem, verify_theorem1
from .trainer import ABLATIONS, TrainConfig, evaluate_split, fit, load_dataset, make_batch, reconstruct_batch, toy_config

log = logging.getLogger("otmr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
MANIFEST_NAME = "manifest.json"


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    artifacts_written: list = field(default_factory=list)
    summary: str = ""

    def add(self, path):
        self.artifacts_written.append(str(path))
        return path


def _limit_threads():
    n = os.environ.get("OTMR_WORKERS")
    if n:
        try:
            n = int(n)
        except ValueError:
            raise ValidationError(f"OTMR_WORKERS must be an integer, got {n!r}") from None
        if n < 1:
            raise ValidationError("OTMR_WORKERS must be >= 1")
        torch.set_num_threads(n)


def _manifest_path(data_dir):
    p = Path(data_dir)
    return p if p.is_file() else p / MANIFEST_NAME


def _load_manifest(data_dir):
    path = _manifest_path(data_dir)
    if not path.exists():
        raise ValidationError(f"no dataset manifest at {path}")
    return DatasetManifest.load(path).validate()


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise StorageError(f"output directory {path} is not writable")
    return Path(path)


def _pair_seed(seed, i):
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def split_counts(n):
    """70/15/15 split sizes; the remainder after the training share is halved."""
    n_train = int(round(0.7 * n))
    n_val = (n - n_train) // 2
    return n_train, n_val, n - n_train - n_val


# --- commands ---------------------------------------------------------------


def cmd_generate_data(n_pairs, size, max_disp, out_dir, seed=0, noise=0.01):
    if n_pairs < 1:
        raise ValidationError("n_pairs must be >= 1")
    out = _mkdir(out_dir)
    res = CommandResult()
    n_train, n_val, _ = split_counts(n_pairs)
    entries = []
    for i in range(n_pairs):
        pair = generate_phantom_pair(size, max_disp, _pair_seed(seed, i), noise=noise)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        names = {"t1_path": f"pair{i:04d}_t1.otmr", "t2_path": f"pair{i:04d}_t2.otmr", "disp_path": f"pair{i:04d}_disp.otmr"}
        res.add(write_raster(pair.t1, out / names["t1_path"]))
        res.add(write_raster(pair.t2, out / names["t2_path"]))
        res.add(write_field(pair.true_displacement, out / names["disp_path"]))
        entries.append({**names, "split": split})
    manifest = DatasetManifest(entries, root=out)
    manifest.save(out / MANIFEST_NAME)
    res.add(out / MANIFEST_NAME)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    res.summary = f"wrote {n_pairs} pairs ({size}x{size}, max_disp={max_disp}) to {out}: {counts}"
    return res


def cmd_init_config(out_path, toy=False):
    cfg = toy_config() if toy else TrainConfig()
    cfg.save(out_path)
    return CommandResult(artifacts_written=[str(out_path)], summary=f"wrote config to {out_path}")


def cmd_train(config_path, data_dir, out_dir, steps=None, seed=None, ablation=None, resume=None):
    cfg = TrainConfig.load(config_path)
    if steps is not None:
        cfg.max_steps = steps
    if seed is not None:
        cfg.seed = seed
    if ablation is not None:
        cfg.ablation = ablation
    cfg.validate()
    manifest = _load_manifest(data_dir)
    out = _mkdir(out_dir)
    res = CommandResult()
    cfg.save(out / "config.yaml")
    res.add(out / "config.yaml")
    try:
        state, train_log = fit(manifest, cfg, out_dir=out, resume=resume)
    except NumericError as exc:
        rec = exc.record or {}
        diag = dict(rec.get("diagnostic", {}))
        diag["last_good"] = str(rec.get("last_good"))
        (out / "diagnostic.json").write_text(json.dumps(diag, indent=2) + "\n")
        if rec.get("log") is not None:
            rec["log"].save(out / "train_log.jsonl")
        raise
    res.add(out / "checkpoint_final.npz")
    res.add(out / "train_log.jsonl")
    lines = [f"trained {state.step} steps (ablation={cfg.ablation}, seed={cfg.seed})"]
    vals = train_log.validations()
    if vals:
        v = vals[-1]
        lines.append(
            f"last validation: PSNR {v['psnr']:.2f} dB (zero-filled {v['psnr_zero_filled']:.2f}), "
            f"SSIM {v['ssim']:.4f}, NMSE {v['nmse']:.4f}"
        )
        if v.get("epe") is not None:
            lines.append(f"endpoint error {v['epe']:.3f} px")
    steps_ = train_log.steps()
    if steps_ and steps_[0].get("l1_gap") is not None:
        lines.append(f"L1 gap first/last step: {steps_[0]['l1_gap']:.4f} / {steps_[-1]['l1_gap']:.4f}")
    res.summary = "\n".join(lines)
    (out / "summary.txt").write_text(res.summary + "\n")
    res.add(out / "summary.txt")
    return res


def _load_model(checkpoint):
    if not Path(checkpoint).exists():
        raise ValidationError(f"no checkpoint at {checkpoint}")
    state, meta, _ = load_checkpoint(checkpoint)
    cfg_dict = meta.get("extra", {}).get("config")
    cfg = TrainConfig.from_dict(cfg_dict) if cfg_dict else TrainConfig(net=state.spec)
    return state, cfg


def cmd_evaluate(checkpoint, data_dir, mask_scheme="random", ratio=0.25, out_dir=None, seed=None, figures=True):
    state, cfg = _load_model(checkpoint)
    manifest = _load_manifest(data_dir)
    test = load_dataset(manifest, "test")
    if len(test) == 0:
        raise ValidationError("test split is empty")
    h, w = test.t1.shape[1:]
    state.spec.validate(image_size=min(h, w))
    mask = make_mask(mask_scheme, ratio, h, w, seed=cfg.seed if seed is None else seed)
    zf, model, extras = evaluate_split(state, test, mask, cfg.ablation)
    out = _mkdir(out_dir or Path(checkpoint).parent / "eval")
    res = CommandResult()
    title = f"{mask_scheme} mask, ratio {ratio:g}, {len(test)} test samples"
    table = metrics.format_table([zf, model], title=title)
    (out / "metrics.txt").write_text(table)
    res.add(out / "metrics.txt")
    metrics.dump_records([zf, model], out / "records.jsonl")
    res.add(out / "records.jsonl")
    if extras["epe"]:
        epe = {"epe_mean": float(np.mean(extras["epe"])), "epe_zero_field_mean": float(np.mean(extras["epe_zero"]))}
        (out / "alignment.json").write_text(json.dumps(epe, indent=2) + "\n")
        res.add(out / "alignment.json")
        table += f"endpoint error: {epe['epe_mean']:.3f} px (zero field {epe['epe_zero_field_mean']:.3f} px)\n"
    if figures:
        res.add(plotting.metric_violins([zf, model], out / "violin.png", title=title))
        batch = make_batch(test.t1, test.t2, mask)
        x_u = magnitude(batch.x_under)[:, 0].numpy()
        images = {"zero-filled": list(x_u), model.method: extras["x_r"]}
        res.add(plotting.error_maps(list(test.t2), images, out / "error_maps.png"))
        if extras["field"] and test.fields and test.fields[0] is not None:
            res.add(plotting.field_quiver(extras["field"][0], out / "field.png", reference=test.fields[0]))
    res.summary = table
    return res


def cmd_verify_theorem(checkpoint, data_dir, n_samples, out_dir=None, force_equal=False, mask_scheme=None, ratio=None):
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    state, cfg = _load_model(checkpoint)
    if cfg.ablation == "without_cms":
        raise ValidationError("checkpoint was trained without cross-modal synthesis; there is no x_G to compare")
    manifest = _load_manifest(data_dir)
    test = load_dataset(manifest, "test")
    n = min(n_samples, len(test))
    if n == 0:
        raise ValidationError("test split is empty")
    h, w = test.t1.shape[1:]
    mask = make_mask(mask_scheme or cfg.mask_scheme, ratio or cfg.mask_ratio, h, w, seed=cfg.seed)
    state.eval()
    fwd = reconstruct_batch(state, make_batch(test.t1[:n], test.t2[:n], mask), cfg.ablation)
    x_g = magnitude(fwd.x_g)[:, 0].numpy()
    x_r = x_g.copy() if force_equal else magnitude(fwd.x_r)[:, 0].numpy()
    records = []
    for i in range(n):
        rec = verify_theorem1(x_r[i], x_g[i], test.t2[i])
        records.append({"sample": i, **rec})
    summary = summarize_theorem(records)
    out = _mkdir(out_dir or Path(checkpoint).parent / "theorem")
    res = CommandResult()
    with open(out / "theorem.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": True, **summary}, sort_keys=True) + "\n")
    res.add(out / "theorem.jsonl")
    res.summary = (
        f"samples {summary['n_samples']}, C = 1/diam = {summary['C']:.6g}, "
        f"max triangle slack {summary['max_triangle_slack']:.3g}, "
        f"full bound holds on {summary['fraction_holds']:.0%}"
    )
    return res


# --- argument parsing -------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="otmr", description="Cross-modal MRI reconstruction with OT-guided synthesis.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic phantom dataset")
    g.add_argument("n_pairs", type=int)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--max-disp", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("init-config", help="write a training config file")
    c.add_argument("--out", required=True)
    c.add_argument("--toy", action="store_true", help="desk-scale settings for 32x32 phantoms")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--mask", choices=SCHEMES, default="random")
    e.add_argument("--ratio", type=float, default=0.25)
    e.add_argument("--seed", type=int, help="mask seed (default: the training seed)")
    e.add_argument("--no-figures", action="store_true")

    v = sub.add_parser("verify-theorem", help="check the L1/W1 bound on test samples")
    v.add_argument("checkpoint")
    v.add_argument("--data", required=True)
    v.add_argument("--out")
    v.add_argument("--n-samples", type=int, default=8)
    v.add_argument("--force-equal", action="store_true", help="debug: replace x_R by x_G")
    return p


def run(argv=None):
    """Parse ``argv``, run the command and return a :class:`CommandResult`."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(exit_code=EXIT_OK if exc.code == 0 else EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _limit_threads()
        if args.command == "generate-data":
            res = cmd_generate_data(args.n_pairs, args.size, args.max_disp, args.out, args.seed, args.noise)
        elif args.command == "init-config":
            res = cmd_init_config(args.out, args.toy)
        elif args.command == "train":
            res = cmd_train(args.config, args.data, args.out, args.steps, args.seed, args.ablation, args.resume)
        elif args.command == "evaluate":
            res = cmd_evaluate(args.checkpoint, args.data, args.mask, args.ratio, args.out, args.seed, not args.no_figures)
        else:
            res = cmd_verify_theorem(args.checkpoint, args.data, args.n_samples, args.out, args.force_equal)
    except NumericError as exc:
        return CommandResult(exit_code=EXIT_RUNTIME, summary=f"error: {exc}")
    except (ValidationError, OTMRError, OSError, ValueError) as exc:
        return CommandResult(exit_code=EXIT_USAGE, summary=f"error: {exc}")
    return res


def main(argv=None):
    res = run(argv)
    if res.summary:
        stream = sys.stdout if res.exit_code == EXIT_OK else sys.stderr
        print(res.summary.rstrip("\n"), file=stream)
    if res.exit_code == EXIT_OK:
        for path in res.artifacts_written:
            log.info("wrote %s", path)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
