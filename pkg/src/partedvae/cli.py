"""Operator surface: train / eval / traverse / generate / transfer / verify.

One command is one process. Run directories carry a config echo (JSON and
key=value text), the per-step loss CSV, and binary checkpoints. PVAE_THREADS
caps the batch-preparation worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, make_dataset, make_model, make_objective, preset
from .data import select_labeled_subset
from .images import tile_grid, write_pgm
from .metrics import (
    FactorScoreConfig,
    classification_accuracy,
    factor_score,
    prior_separation_report,
    representation_fn,
)
from .optim import Adam
from .tensor import Tensor, make_rng
from .training import train
from .verify import run_all_checks

__all__ = ["main"]

METRICS_CSV_VERSION = 1


def _data_threads() -> int:
    try:
        return max(1, int(os.environ.get("PVAE_THREADS", "1")))
    except ValueError:
        return 1


def _parse_labels(text: str):
    return float(text) if "." in text or "e" in text.lower() else int(text)


def _assemble_config(args) -> RunConfig:
    cfg = preset(args.preset) if args.preset else RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg.apply_text(f.read())
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        cfg.set_flat(key.strip(), value)
    if getattr(args, "labels", None) is not None:
        cfg.labels = _parse_labels(args.labels)
    if getattr(args, "gamma_bc", None) is not None:
        cfg.gamma_bc = args.gamma_bc
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "mnist_dir", None):
        cfg.mnist_dir = args.mnist_dir
    return cfg


def _prepared_dataset(cfg: RunConfig):
    ds = make_dataset(cfg)
    if hasattr(ds, "materialize") and len(ds) <= 200_000:
        ds.materialize()
    return ds


def cmd_train(args) -> int:
    try:
        cfg = _assemble_config(args)
    except (KeyError, ValueError) as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as f:
        f.write(cfg.to_json())
    with open(os.path.join(cfg.out_dir, "config.kv"), "w") as f:
        f.write(cfg.to_text())

    dataset = _prepared_dataset(cfg)
    model = make_model(cfg, make_rng([cfg.seed, 2]))
    labeled = None
    if cfg.labels:
        labeled = select_labeled_subset(dataset, cfg.labels, make_rng([cfg.seed, 1]), stratified=cfg.stratified)
    rng = make_rng([cfg.seed, 0])
    opt_main = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    opt_sup = (
        Adam(model.encoder_parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        if labeled is not None and len(labeled)
        else None
    )
    start_iteration = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        ckpt.restore_model(model)
        ckpt.restore_optimizer("main", opt_main)
        if opt_sup is not None:
            ckpt.restore_optimizer("sup", opt_sup)
        rng = ckpt.make_rng()
        start_iteration = ckpt.iteration
        print(f"resumed from {args.resume} at iteration {start_iteration}")

    def write_ckpt(name: str, iteration: int) -> None:
        opts = {"main": opt_main}
        if opt_sup is not None:
            opts["sup"] = opt_sup
        save_checkpoint(os.path.join(cfg.out_dir, name), model, cfg.to_text(), iteration, rng, opts)

    callback = None
    if cfg.checkpoint_every:

        def callback(m, iteration):
            if iteration % cfg.checkpoint_every == 0:
                write_ckpt("last.ckpt", iteration)

    log = train(
        model,
        dataset,
        make_objective(cfg),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        rng=rng,
        labeled=labeled,
        sup_every=cfg.sup_every,
        plateau_factor=cfg.plateau_factor,
        plateau_patience=cfg.plateau_patience,
        min_lr=cfg.min_lr,
        max_steps=cfg.max_steps or None,
        prefetch_threads=_data_threads(),
        step_callback=callback,
        optimizers=(opt_main, opt_sup),
        start_iteration=start_iteration,
    )
    log.to_csv(os.path.join(cfg.out_dir, "loss.csv"))
    final_iteration = start_iteration + len(log)
    write_ckpt("final.ckpt", final_iteration)
    if log.aborted:
        print(f"training aborted: {log.abort_reason}", file=sys.stderr)
        print("last good parameters written to final.ckpt", file=sys.stderr)
        return 1
    print(f"trained {len(log)} steps -> {cfg.out_dir}")
    return 0


def _load_model(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_text(ckpt.config_text)
    model = make_model(cfg, make_rng([cfg.seed, 2]))
    ckpt.restore_model(model)
    return ckpt, cfg, model


def cmd_eval(args) -> int:
    ckpt, cfg, model = _load_model(args.checkpoint)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"factor", "accuracy", "separation"}
    if unknown:
        print(f"unknown metrics: {sorted(unknown)}", file=sys.stderr)
        return 2
    dataset = _prepared_dataset(cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    rows = []
    if "factor" in wanted:
        if not hasattr(dataset, "sample_fixed_factor_batch"):
            print(f"factor score requires factor-annotated data; dataset {cfg.dataset!r} has none", file=sys.stderr)
            return 2
        fs_cfg = FactorScoreConfig(seed=seed)
        fn, _ = representation_fn(model)
        rows.append(("factor_score", factor_score(fn, dataset, fs_cfg)))
        fn_p, _ = representation_fn(model, include_class_probs=True)
        rows.append(("factor_score_with_class_probs", factor_score(fn_p, dataset, fs_cfg)))
    if "accuracy" in wanted:
        if getattr(dataset, "labels", None) is None:
            print("accuracy requires labeled data", file=sys.stderr)
            return 2
        rows.append(("classification_accuracy", classification_accuracy(model, dataset)))
    if "separation" in wanted:
        report = prior_separation_report(model, cfg.delta)
        for k, entry in report.items():
            rows.append((f"prior_bc_max_offdiag_k{k}", entry["max_offdiag"]))
            rows.append((f"prior_bc_pairs_exceeding_delta_k{k}", float(entry["exceeding"])))
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "metrics.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"v{METRICS_CSV_VERSION}:metric", "value", "seed", "config_hash"])
        for name, value in rows:
            w.writerow([name, value, seed, cfg.config_hash()])
    for name, value in rows:
        print(f"{name} = {value}")
    return 0


def _write_grid(path, images, rows, cols, manifest, manifest_path) -> None:
    write_pgm(path, tile_grid(images, rows, cols))
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)


def cmd_traverse(args) -> int:
    ckpt, cfg, model = _load_model(args.checkpoint)
    rng = make_rng(args.seed if args.seed is not None else cfg.seed)
    c, u, z = model.sample_prior(rng, count=1)
    values = [float(v) for v in args.values.split(",")] if args.values else list(np.linspace(-2.0, 2.0, 8))
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    frames = []
    row_names = []
    try:
        if args.block == "z":
            for dim in range(model.shape.d_z):
                frames.append(model.traverse((c, u, z), ("z", dim), values))
                row_names.append(f"z[{dim}]")
        elif args.block == "u":
            for k in range(model.shape.K):
                for dim in range(model.shape.d_u):
                    frames.append(model.traverse((c, u, z), ("u", k, dim), values))
                    row_names.append(f"u{k}[{dim}]")
        else:
            values = []
            for k in range(model.shape.K):
                class_values = list(range(model.shape.L[k]))
                frames.append(model.traverse((c, u, z), ("c", k), class_values))
                row_names.append(f"c{k}")
                values = class_values if len(class_values) > len(values) else values
            width = max(len(f) for f in frames)
            frames = [
                np.concatenate([f, np.zeros((width - len(f), *f.shape[1:]), dtype=f.dtype)]) if len(f) < width else f
                for f in frames
            ]
    except IndexError as err:
        print(f"traversal target out of range: {err}", file=sys.stderr)
        return 2
    images = np.concatenate(frames, axis=0)
    cols = len(values) if args.block != "c" else max(model.shape.L)
    path = os.path.join(out_dir, f"traverse_{args.block}.pgm")
    manifest = {
        "file": os.path.basename(path),
        "block": args.block,
        "rows": row_names,
        "values": list(values),
        "tile_shape": list(model.shape.image_shape[1:]),
    }
    _write_grid(path, images, len(row_names), cols, manifest, os.path.join(out_dir, "traverse_manifest.json"))
    print(f"wrote {path} ({len(row_names)}x{cols} tiles)")
    return 0


def cmd_generate(args) -> int:
    ckpt, cfg, model = _load_model(args.checkpoint)
    rng = make_rng(args.seed if args.seed is not None else cfg.seed)
    per_class = args.count
    rows = model.shape.L[0]
    frames = []
    for cls in range(rows):
        fixed = [cls] + [0] * (model.shape.K - 1)
        _, u, z = model.sample_prior(rng, count=per_class, fixed_c=fixed)
        frames.append(model.decode(Tensor(u.astype(model.dtype)), Tensor(z.astype(model.dtype))).data)
    images = np.concatenate(frames, axis=0)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "generate.pgm")
    manifest = {
        "file": "generate.pgm",
        "rows": [f"class {i} of variable 0" for i in range(rows)],
        "columns": per_class,
        "tile_shape": list(model.shape.image_shape[1:]),
    }
    _write_grid(path, images, rows, per_class, manifest, os.path.join(out_dir, "generate_manifest.json"))
    print(f"wrote {path} ({rows}x{per_class} tiles)")
    return 0


def cmd_transfer(args) -> int:
    ckpt, cfg, model = _load_model(args.checkpoint)
    dataset = _prepared_dataset(cfg)
    content_idx = [int(v) for v in args.content.split(",")]
    style_idx = [int(v) for v in args.style.split(",")]
    frames = []
    for ci in content_idx:
        for si in style_idx:
            xc = dataset.image_batch(np.array([ci]))
            xs = dataset.image_batch(np.array([si]))
            frames.append(model.attribute_transfer(xc, xs))
    images = np.concatenate(frames, axis=0)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "transfer.pgm")
    manifest = {
        "file": "transfer.pgm",
        "rows": [f"content {i}" for i in content_idx],
        "columns": [f"style {i}" for i in style_idx],
        "tile_shape": list(model.shape.image_shape[1:]),
    }
    _write_grid(path, images, len(content_idx), len(style_idx), manifest, os.path.join(out_dir, "transfer_manifest.json"))
    print(f"wrote {path} ({len(content_idx)}x{len(style_idx)} tiles)")
    return 0


def cmd_verify(args) -> int:
    results = run_all_checks(seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvae", description="Parted-latent VAE toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        if config:
            sp.add_argument("--config", default=None, help="key=value config file")
            sp.add_argument("--preset", choices=["mnist", "dsprites-lite", "sanity"], default=None)
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--labels", default=None, help="label budget: count or fraction")
    t.add_argument("--gamma-bc", type=float, default=None, dest="gamma_bc")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--mnist-dir", default=None, dest="mnist_dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="compute metrics for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--metrics", default="factor,separation")
    common(e, config=False)
    e.set_defaults(fn=cmd_eval)

    tr = sub.add_parser("traverse", help="latent traversal grid")
    tr.add_argument("checkpoint")
    tr.add_argument("--block", choices=["z", "u", "c"], default="z")
    tr.add_argument("--values", default=None, help="comma-separated traversal values")
    common(tr, config=False)
    tr.set_defaults(fn=cmd_traverse)

    g = sub.add_parser("generate", help="decode prior samples")
    g.add_argument("checkpoint")
    g.add_argument("--count", type=int, default=8, help="samples per class row")
    common(g, config=False)
    g.set_defaults(fn=cmd_generate)

    x = sub.add_parser("transfer", help="attribute-transfer grid")
    x.add_argument("checkpoint")
    x.add_argument("--content", required=True, help="comma-separated dataset indices")
    x.add_argument("--style", required=True, help="comma-separated dataset indices")
    common(x, config=False)
    x.set_defaults(fn=cmd_transfer)

    v = sub.add_parser("verify", help="run the oracle suite")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
