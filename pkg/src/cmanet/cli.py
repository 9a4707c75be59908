"""Command-line entry point: ``cmanet <subcommand> [flags]``.

Exit status is 0 on success, 1 on a domain error (bad file, failed check),
2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from cmanet import config as cfgmod
from cmanet.cma import attention_weights
from cmanet.data import DataConfig, FormatError, GenerationError, batch_snippets, generate_binding_dataset, read_dataset, write_dataset
from cmanet.export import write_attention_map
from cmanet.model import CheckpointError, build_model, flow_config, forward_snippet, load_checkpoint, rgb_config, save_checkpoint
from cmanet.tensor import Tensor, no_grad
from cmanet.training import evaluate, fusion_weight_sweep, iterative_train, snippet_scores
from cmanet.verification import gradcheck_suite, oracle_check, reports_csv

log = logging.getLogger("cmanet")

COMMANDS = ("gen-data", "train", "eval", "gradcheck", "fuse-sweep", "attn-map", "oracle-check")


class DomainError(RuntimeError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmanet", description="Cross-modality attention two-stream toolkit")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="key = value config file")
        sp.add_argument("--seed", type=int, help="single source of randomness (overrides config)")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        return sp

    common(sub.add_parser("gen-data", help="generate train/val binding datasets"))
    sp = common(sub.add_parser("train", help="iterative CMA training"))
    sp.add_argument("--dataset", metavar="PATH", required=True, help="dataset directory (train.cmad, val.cmad) or file")
    for name, hlp in (("eval", "top-1 of a checkpoint"), ("fuse-sweep", "fused top-1 across fusion weights")):
        sp = common(sub.add_parser(name, help=hlp))
        sp.add_argument("--dataset", metavar="PATH", required=True)
        sp.add_argument("--checkpoint", metavar="PATH", required=True)
        sp.add_argument("--segments", type=int)
        if name == "eval":
            sp.add_argument("--weights", metavar="R:F", help="fusion weights, e.g. 5:1")
        else:
            sp.add_argument("--grid", type=int, default=11, metavar="N", help="number of weight fractions in [0, 1]")
    common(sub.add_parser("gradcheck", help="finite-difference check of every op"))
    sp = common(sub.add_parser("attn-map", help="export attention maps as PGM + CSV"))
    sp.add_argument("--dataset", metavar="PATH", required=True)
    sp.add_argument("--checkpoint", metavar="PATH", required=True)
    sp.add_argument("--query", metavar="Y,X", required=True, help="query position on the block's feature grid")
    sp.add_argument("--block", metavar="NAME", default="rgb.cma_s2b0", help="e.g. rgb.cma_s2b0")
    sp.add_argument("--video", type=int, default=0, metavar="N", help="video index in the dataset")
    common(sub.add_parser("oracle-check", help="attention kernel vs looped oracle"))
    return p


def _resolve(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfgmod.ConfigSyntaxError(f"--set expects KEY=VALUE, got {item!r}")
        cfgmod.set_value(cfg, key.strip(), value)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if getattr(args, "segments", None) is not None:
        cfg.train.segments_test = args.segments
    cfgmod.validate(cfg)
    return cfg


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _model(cfg: cfgmod.ExperimentConfig, n_classes: int):
    m = cfg.model
    kw = dict(stage_channels=m.stage_channels, blocks_per_stage=m.blocks_per_stage, cma_insertion=m.cma_insertion,
              num_classes=n_classes, dropout=cfg.train.dropout)
    return build_model(rgb_config(**kw), flow_config(**kw), seed=cfg.train.seed)


def _datasets(path):
    if os.path.isdir(path):
        train = read_dataset(os.path.join(path, "train.cmad"))
        vpath = os.path.join(path, "val.cmad")
        return train, (read_dataset(vpath) if os.path.exists(vpath) else None)
    return read_dataset(path), None


def _eval_set(path):
    train, val = _datasets(path)
    return val if val is not None else train


def _weights(text):
    r, sep, f = (text or "").partition(":")
    if not sep:
        raise cfgmod.ConfigSyntaxError(f"--weights expects R:F, got {text!r}")
    return float(r), float(f)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    out = _out_dir(args)
    seed = cfg.train.seed
    train = generate_binding_dataset(cfg.n_train, cfg.data, seed=seed * 2)
    val = generate_binding_dataset(cfg.n_val, cfg.data, seed=seed * 2 + 1)
    write_dataset(train, os.path.join(out, "train.cmad"))
    write_dataset(val, os.path.join(out, "val.cmad"))
    print(f"wrote {len(train)} train / {len(val)} val videos to {out}")


def cmd_train(args, cfg):
    out = _out_dir(args)
    train, val = _datasets(args.dataset)
    model = _model(cfg, train.n_classes)
    epoch_rows = []

    def on_epoch(row):
        epoch_rows.append([row["iteration"], row["branch"], row["epoch"], _fmt(row["lr"]), _fmt(row["train_loss"]),
                           _fmt(row["val_top1"])])

    def on_iteration(rep, m):
        save_checkpoint(m, os.path.join(out, f"iter{rep.iteration}.cmaw"))
        print(f"iter {rep.iteration} trained={rep.trained} rgb={rep.rgb_top1:.4f} flow={rep.flow_top1:.4f} "
              f"fused={rep.fused_top1:.4f} weights={rep.weights[0]:g}:{rep.weights[1]:g}", flush=True)

    reports = iterative_train(model, train, cfg.train, val, on_iteration=on_iteration, on_epoch=on_epoch)
    save_checkpoint(model, os.path.join(out, "model.cmaw"))
    _write_csv(os.path.join(out, "metrics_epochs.csv"), ["iteration", "branch", "epoch", "lr", "train_loss", "val_top1"], epoch_rows)
    _write_csv(
        os.path.join(out, "metrics_iterations.csv"),
        ["iteration", "trained", "rgb_top1", "flow_top1", "fused_top1", "w_rgb", "w_flow"],
        [[r.iteration, r.trained, _fmt(r.rgb_top1), _fmt(r.flow_top1), _fmt(r.fused_top1), _fmt(r.weights[0]),
          _fmt(r.weights[1])] for r in reports],
    )
    with open(os.path.join(out, "config.cfg"), "w") as fh:
        fh.write(cfgmod.format_config(cfg))


def _load(args, cfg):
    ds = _eval_set(args.dataset)
    model = _model(cfg, ds.n_classes)
    load_checkpoint(model, args.checkpoint)
    return model, ds


def cmd_eval(args, cfg):
    model, ds = _load(args, cfg)
    weights = _weights(args.weights) if args.weights else tuple(cfg.train.weights_iter0)
    res = evaluate(model, ds, cfg.train.segments_test, cfg.train.flip_averaging, weights)
    print(f"rgb_top1 = {res.rgb_top1:.6f}\nflow_top1 = {res.flow_top1:.6f}\nfused_top1 = {res.fused_top1:.6f}"
          f"  (weights {weights[0]:g}:{weights[1]:g})")
    if args.out:
        _write_csv(os.path.join(_out_dir(args), "eval.csv"), ["rgb_top1", "flow_top1", "fused_top1", "w_rgb", "w_flow"],
                   [[_fmt(res.rgb_top1), _fmt(res.flow_top1), _fmt(res.fused_top1), _fmt(weights[0]), _fmt(weights[1])]])


def cmd_fuse_sweep(args, cfg):
    if args.grid < 2:
        raise cfgmod.ConfigSyntaxError("--grid needs at least 2 points")
    model, ds = _load(args, cfg)
    grid = np.linspace(0.0, 1.0, args.grid)
    curve, best = fusion_weight_sweep(model, ds, grid, cfg.train.segments_test, cfg.train.flip_averaging)
    for w, acc in curve:
        print(f"w_rgb = {w:.4f}  fused_top1 = {acc:.6f}")
    print(f"argmax w_rgb = {best:.4f}")
    if args.out:
        _write_csv(os.path.join(_out_dir(args), "fuse_sweep.csv"), ["w_rgb", "fused_top1"],
                   [[_fmt(w), _fmt(a)] for w, a in curve])


def cmd_gradcheck(args, cfg):
    reports = gradcheck_suite(cfg.train.seed)
    for r in reports:
        print(r.line())
    failed = [r.op for r in reports if not r.passed]
    if args.out:
        with open(os.path.join(_out_dir(args), "gradcheck.csv"), "w") as fh:
            fh.write(reports_csv(reports))
    if failed:
        raise DomainError("gradcheck failed for: " + ", ".join(failed))
    print(f"all {len(reports)} ops pass")


def cmd_oracle_check(args, cfg):
    worst = oracle_check(100, cfg.train.seed)
    print(f"max abs difference over 100 instances: {worst:.3e}")
    if worst > 1e-12:
        raise DomainError("attention kernel disagrees with the oracle")


def _block_inputs(model, rgb, flow, block_name):
    """Feature maps entering the named CMA block (query map, key/value map)."""
    branch, _, point_name = block_name.partition(".")
    if branch not in ("rgb", "flow"):
        raise DomainError(f"unknown block {block_name!r}")
    owner = model.branch(branch)
    points = {f"cma_s{s}b{b}": (s, b) for s, b in owner.cma}
    if point_name not in points:
        raise DomainError(f"unknown block {block_name!r}; available: {', '.join(sorted(points))}")
    point = points[point_name]
    taps = {}
    with no_grad():
        forward_snippet(model, rgb, flow, training=False, taps=taps)
    return taps[(branch, point)], owner.cma[point]


def cmd_attn_map(args, cfg):
    try:
        qy, qx = (int(v) for v in args.query.split(","))
    except ValueError:
        raise cfgmod.ConfigSyntaxError(f"--query expects Y,X, got {args.query!r}") from None
    model, ds = _load(args, cfg)
    if not 0 <= args.video < len(ds):
        raise DomainError(f"video index {args.video} out of range")
    rgb, flow = batch_snippets(ds, [args.video], 1, train=False)
    (x, y), params = _block_inputs(model, Tensor(rgb), Tensor(flow), args.block)
    qshape = x.shape[1:3]
    if not (0 <= qy < qshape[0] and 0 <= qx < qshape[1]):
        raise DomainError(f"query ({qy},{qx}) outside the {qshape[0]}x{qshape[1]} feature grid of {args.block}")
    aw = attention_weights(x, y, params)
    row = aw.matrix[qy * qshape[1] + qx]
    out = _out_dir(args)
    stem = os.path.join(out, f"attn_{args.block}_{qy}_{qx}")
    write_attention_map(stem + ".pgm", stem + ".csv", row, aw.key_grid_shape, rgb.shape[1:3])
    print(f"wrote {stem}.pgm and {stem}.csv (row sum {row.sum():.12f})")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "fuse-sweep": cmd_fuse_sweep,
    "attn-map": cmd_attn_map,
    "oracle-check": cmd_oracle_check,
}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("cmanet: error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        cfg = _resolve(args)
    except (cfgmod.ConfigSyntaxError, OSError) as exc:
        print(f"cmanet: error: {exc}", file=sys.stderr)
        return 2
    print(f"# cmanet {args.command} seed={cfg.train.seed}")
    print(cfgmod.format_config(cfg), end="", flush=True)
    try:
        HANDLERS[args.command](args, cfg)
    except cfgmod.ConfigSyntaxError as exc:
        print(f"cmanet: error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, FormatError, CheckpointError, GenerationError, OSError, ValueError, IndexError) as exc:
        print(f"cmanet: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    logging.basicConfig(level=os.environ.get("CMANET_LOG", "WARNING"), format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
