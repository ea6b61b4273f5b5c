"""``fosnet`` command line.

Exit codes: 0 success, 1 usage error (bad flags, missing or invalid
config), 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import fost
from .data import SyntheticSceneSpec, generate_dataset, load_dataset, normalize, save_dataset
from .model import export_cam_grid, forward_fosnet, load_backbone, load_checkpoint, write_cam
from .runner import (ConfigError, TrainConfig, ablation_run, apply_overrides, build_from_config, evaluate_topk,
                     load_matrix, pretrain_object_net, ten_crop_eval, train)
from .runner.ablation import REPORT_COLUMNS, write_csv
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# keys a CLI config file may carry besides the TrainConfig fields
_CLI_KEYS = ("data", "out_dir", "object_checkpoint")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_cfg(args) -> tuple[TrainConfig, dict]:
    cli = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        with open(p) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{p}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be an object")
        cli = {k: d.pop(k) for k in _CLI_KEYS if k in d}
        cfg = TrainConfig.from_json(d)
    else:
        cfg = TrainConfig()
    over = list(args.set or [])
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("gamma", "gamma"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            over.append(f"{key}={json.dumps(v)}")
    if over:
        cfg = apply_overrides(cfg, over)
    return cfg, cli


def _dataset(path: Optional[str], data_seed: int):
    if path:
        return load_dataset(path)
    return generate_dataset(SyntheticSceneSpec(), data_seed)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file (TrainConfig fields, plus data/out_dir)")
    p.add_argument("--data", help="dataset directory (default: generate the default synthetic set)")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fosnet", description="Scene recognition with scene coherence and object fusion.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="generate the synthetic dataset")
    g.add_argument("--spec", help="SyntheticSceneSpec JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain-object", help="pretrain ObjectNet on object labels")
    _add_train_flags(p)

    t = sub.add_parser("train", help="train PlacesNet or a fused model")
    _add_train_flags(t)
    t.add_argument("--object-checkpoint", help="pretrained ObjectNet (fusion configs)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--data-seed", type=int, default=0)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--k", type=int, default=5)
    e.add_argument("--ten-crop", action="store_true")

    c = sub.add_parser("cam", help="export a class activation map")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--image", required=True, help="FOST image (H, W, 3) in [0, 1]")
    c.add_argument("--class", dest="class_idx", type=int, required=True)
    c.add_argument("--out", help="output prefix (default: next to the image)")

    a = sub.add_parser("ablate", help="run an ablation matrix")
    a.add_argument("--matrix", required=True)
    a.add_argument("--data")
    a.add_argument("--data-seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--report-only", action="store_true", help="re-evaluate saved checkpoints, no training")
    return parser


def _cmd_generate(args) -> int:
    spec = SyntheticSceneSpec()
    if args.spec:
        p = Path(args.spec)
        if not p.exists():
            raise FileNotFoundError(f"spec file not found: {p}")
        with open(p) as fh:
            try:
                spec = SyntheticSceneSpec.from_json(json.load(fh))
            except (TypeError, json.JSONDecodeError) as e:
                raise ConfigError(f"{p}: {e}") from None
    ds = generate_dataset(spec, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.val)} val samples to {args.out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg, cli = _load_cfg(args)
    ds = _dataset(args.data or cli.get("data"), args.data_seed)
    out = Path(args.out or cli.get("out_dir") or f"runs/object-seed{cfg.seed}")
    pretrain_object_net(ds, cfg, out)
    print(f"ObjectNet checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg, cli = _load_cfg(args)
    ds = _dataset(args.data or cli.get("data"), args.data_seed)
    out = Path(args.out or cli.get("out_dir") or f"runs/{cfg.name}-seed{cfg.seed}")
    obj = None
    ckpt = args.object_checkpoint or cli.get("object_checkpoint")
    if cfg.fusion_kind is not None:
        if ckpt:
            obj, _ = load_backbone(ckpt)
        else:
            print("no --object-checkpoint given: pretraining ObjectNet first", file=sys.stderr)
            obj = pretrain_object_net(ds, cfg, out / "object_net")
    a = build_from_config(cfg, ds, obj)
    res = train(a, ds, cfg, out)
    print(json.dumps({"best_epoch": res.best_epoch, "top1": res.best.top1, "top5": res.best.top5,
                      "mean_scl": res.best.mean_scl, "checkpoint": str(res.checkpoint),
                      "log": str(res.log_path)}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    a, extra = load_checkpoint(args.checkpoint)
    ds = _dataset(args.data, args.data_seed)
    split = ds.train if args.split == "train" else ds.val
    k = args.k
    if not 1 <= k <= ds.num_scenes:
        raise UsageError(f"--k must be in [1, {ds.num_scenes}]")
    fn = ten_crop_eval if args.ten_crop else evaluate_topk
    m = fn(a, split, k, ds.mean, ds.std)
    print(json.dumps({"split": args.split, "ten_crop": args.ten_crop, "n": m.n, "top1": m.top1,
                      f"top{k}": m.top5, "mean_scl": m.mean_scl,
                      "per_class": [None if np.isnan(v) else float(v) for v in m.per_class]}))
    return EXIT_OK


def _cmd_cam(args) -> int:
    a, extra = load_checkpoint(args.checkpoint)
    if a.places_net.spec.head != "conv1x1_gap":
        raise ValueError("checkpoint has a GAP-FC head: no grid scores to export")
    img = fost.load(args.image)
    if img.shape != a.places_net.spec.input_hw + (a.places_net.spec.in_channels,):
        raise ValueError(f"{args.image}: image shape {img.shape} does not match the model input")
    if "mean" in extra:
        img = normalize(img, np.asarray(extra["mean"]), np.asarray(extra["std"]))
    with no_grad():
        out = forward_fosnet(a, Tensor(img, dtype=a.dtype), training=False)
    cam = export_cam_grid(out.grid, args.class_idx)
    prefix = args.out or str(Path(args.image).with_suffix("")) + f"_cam{args.class_idx}"
    pgm, csv = write_cam(prefix, cam)
    print(f"wrote {pgm} and {csv}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    configs, seeds, ocfg = load_matrix(args.matrix)
    if args.seeds:
        seeds = args.seeds
    ds = _dataset(args.data, args.data_seed)
    if args.report_only:
        from .runner import report_from_checkpoints
        report = report_from_checkpoints(args.out, ds)
        write_csv(Path(args.out) / "report.csv", REPORT_COLUMNS, report)
    else:
        report = ablation_run(configs, ds, seeds, args.out, object_cfg=ocfg,
                              log=lambda s: print(s, file=sys.stderr))
    for row in report:
        print(f"{row['config']}: top1 {row['top1_mean']:.4f}+-{row['top1_std']:.4f} "
              f"scl {row['scl_mean']:.4f}")
    return EXIT_OK


_COMMANDS = {"generate": _cmd_generate, "pretrain-object": _cmd_pretrain, "train": _cmd_train,
             "eval": _cmd_eval, "cam": _cmd_cam, "ablate": _cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("fosnet: error: a subcommand is required")
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ConfigError) as e:
        # missing or malformed inputs named on the command line
        print(f"fosnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - the CLI maps every failure to an exit code
        print(f"fosnet: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
