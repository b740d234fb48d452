"""Command-line surface: pretrain, bootstrap, probe, gc-export, mask-demo,
check-grad.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every subcommand is
deterministic given its config and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import build_dataset, load_manifest, load_pointcloud, write_ply_colored
from .diffcore import Value, finite_diff_report
from .geometry import fps, knn_group, normalize_patches, unit_sphere_normalize
from .losses import LossWeights, loss_gc, loss_rec_f, loss_rec_p, total_loss
from .masking import CurriculumSchedule, gc_guided_mask, mask_count, n_sel, random_mask
from .model import ModelConfig, init_params, student_forward, teacher_scores
from .pipeline import (
    TrainConfig,
    _state_from_checkpoint,
    load_checkpoint,
    train_run,
)
from .probe import extract_features, linear_probe_accuracy

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gm3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="bootstrap (if configured) then pretrain")
    pre.add_argument("--config", required=True)
    pre.add_argument("--out", default="run")
    pre.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a top-level scalar config key")
    pre.add_argument("--threads", type=int, default=1,
                     help="worker cap (desk-scale build always runs one)")

    boot = sub.add_parser("bootstrap", help="train only the plain random-masking model")
    boot.add_argument("--config", required=True)
    boot.add_argument("--out", default="run")
    boot.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    boot.add_argument("--threads", type=int, default=1)

    probe = sub.add_parser("probe", help="linear evaluation of a checkpoint")
    probe.add_argument("--checkpoint", required=True)
    probe.add_argument("--data", required=True,
                       help="manifest JSON or dataset-spec JSON with train/test")
    probe.add_argument("--epochs", type=int, default=300)
    probe.add_argument("--lr", type=float, default=0.5)

    exp = sub.add_parser("gc-export", help="write per-patch complexity colors as PLY")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--input", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--seed", type=int, default=0)

    demo = sub.add_parser("mask-demo", help="print a mask partition for an epoch/seed")
    demo.add_argument("--n", type=int, default=16)
    demo.add_argument("--ratio", type=float, default=0.6)
    demo.add_argument("--epoch", type=int, default=0)
    demo.add_argument("--e-max", type=int, default=60)
    demo.add_argument("--max-hard-ratio", type=float, default=0.5)
    demo.add_argument("--seed", type=int, default=0)

    sub.add_parser("check-grad", help="finite-difference suite over the full loss")
    return parser


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got '{item}'")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(value, (dict, list)):
            raise _UsageError(f"--set only overrides scalar keys, got '{item}'")
        doc[key] = value
    return doc


def _load_config(path: str, overrides: list[str]) -> TrainConfig:
    doc = json.loads(Path(path).read_text())
    return TrainConfig.from_dict(_apply_overrides(doc, overrides))


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args.config, args.set)
    if args.threads < 1:
        raise _UsageError("--threads must be >= 1")
    _, _, metrics = train_run(cfg, out_dir=args.out)
    print(f"pretrain complete: {len(metrics)} steps, "
          f"final l_rec_p={metrics[-1].l_rec_p:.6g}")
    print(f"checkpoint={Path(args.out) / 'checkpoint.gm3d'}")
    return 0


def _cmd_bootstrap(args) -> int:
    from .pipeline import _save_single_tree, bootstrap_knowledge_teacher

    cfg = _load_config(args.config, args.set)
    tree, metrics = bootstrap_knowledge_teacher(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_single_tree(out / "bootstrap.gm3d", tree, cfg)
    last = metrics[-1].l_rec_p if metrics else float("nan")
    print(f"bootstrap complete: {len(metrics)} steps, final l_rec_p={last:.6g}")
    return 0


def _load_probe_datasets(path: str):
    doc = json.loads(Path(path).read_text())
    if "kind" in doc:
        return build_dataset(doc)
    return load_manifest(path)


def _cmd_probe(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    state = _state_from_checkpoint(ck)
    train_ds, test_ds = _load_probe_datasets(args.data)
    cfg = ck.model_config
    train_f = extract_features(state.student, [c for c, _ in train_ds.samples], cfg)
    test_f = extract_features(state.student, [c for c, _ in test_ds.samples], cfg)
    acc = linear_probe_accuracy(train_f, train_ds.labels(), test_f, test_ds.labels(),
                                epochs=args.epochs, lr=args.lr)
    print(f"accuracy={acc}")
    return 0


def _cmd_gc_export(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    state = _state_from_checkpoint(ck)
    cfg = ck.model_config
    cloud = unit_sphere_normalize(load_pointcloud(args.input))
    centers = fps(cloud, cfg.n_patches, seed=args.seed)
    ps = knn_group(cloud, centers, cfg.patch_size)
    scores = teacher_scores(normalize_patches(ps), state.teacher, cfg).values

    lo, hi = float(scores.min()), float(scores.max())
    t = np.full_like(scores, 0.5) if hi == lo else (scores - lo) / (hi - lo)
    red = np.floor(255.0 * t + 0.5).astype(np.int64)
    colors_per_patch = np.stack([red, np.zeros_like(red), 255 - red], axis=1)

    points = ps.patches.reshape(-1, 3)  # absolute coordinates
    colors = np.repeat(colors_per_patch, cfg.patch_size, axis=0)
    write_ply_colored(args.out, points, colors)
    print(f"wrote {len(points)} colored vertices to {args.out}")
    return 0


def _cmd_mask_demo(args) -> int:
    sched = CurriculumSchedule(e_max=args.e_max, max_hard_ratio=args.max_hard_ratio)
    n_masked = mask_count(args.n, args.ratio)
    ns = n_sel(min(args.epoch, args.e_max), sched, n_masked)
    rng = np.random.default_rng(args.seed)
    scores = rng.normal(size=args.n)
    part = gc_guided_mask(scores, n_masked, ns, rng)
    print(f"epoch={args.epoch} n={args.n} n_masked={n_masked} n_sel={ns}")
    print(f"masked={part.masked.tolist()}")
    print(f"visible={part.visible.tolist()}")
    return 0


def _toy_loss_check() -> dict[str, float]:
    """Finite-difference report for the full training loss on a toy model."""
    cfg = ModelConfig(embed_dim=16, encoder_depth=2, decoder_depth=1, heads=2,
                      mlp_ratio=2, n_patches=8, patch_size=4)
    weights = LossWeights(alpha=1.0, beta=1000.0, gamma=10.0, warmup_epochs=0)

    rng = np.random.default_rng(12)
    from .data import synth_dataset

    ds = synth_dataset(per_class=1, n_points=64, seed=3)
    samples = []
    for cloud, _ in ds.samples[:2]:
        centers = fps(cloud, cfg.n_patches, seed=rng)
        ps = normalize_patches(knn_group(cloud, centers, cfg.patch_size))
        part = random_mask(cfg.n_patches, cfg.mask_ratio, rng)
        feats = rng.normal(size=(cfg.n_patches, cfg.embed_dim))
        samples.append((ps, part, feats))

    params = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    # spread parameters away from the zero-bias init: there the predicted
    # points of a patch coincide, every perturbation crosses a nearest-
    # neighbor tie, and central differences straddle the kink
    spread = np.random.default_rng(77)
    for v in params.values():
        v.data = v.data + spread.normal(0.0, 0.05, size=v.data.shape)

    def f(p):
        totals = []
        for ps, part, feats in samples:
            out = student_forward(ps, part, p, cfg)
            lp, chamfer_vec = loss_rec_p(out.recon, ps.patches[part.masked])
            lf, feat_vec = loss_rec_f(feats, out.decoder_tokens, part.masked)
            gt = chamfer_vec.data + feat_vec.data
            lg = loss_gc(out.gc_scores.take(np.arange(part.n_visible, part.n_patches)), gt)
            totals.append(total_loss(weights, lg, lp, lf, epoch=0))
        return (totals[0] + totals[1]) * 0.5

    return finite_diff_report(f, params, max_coords_per_param=4,
                              rng=np.random.default_rng(99))


def _cmd_check_grad(_args) -> int:
    report = _toy_loss_check()
    worst = max(report.values())
    for name, err in sorted(report.items(), key=lambda kv: -kv[1])[:10]:
        print(f"{name}: {err:.3e}")
    print(f"max_relative_error={worst:.3e}")
    if worst > 1e-3:
        print("gradient check FAILED", file=sys.stderr)
        return 2
    print("gradient check passed")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "bootstrap": _cmd_bootstrap,
    "probe": _cmd_probe,
    "gc-export": _cmd_gc_export,
    "mask-demo": _cmd_mask_demo,
    "check-grad": _cmd_check_grad,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure surface
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
