"""Ablation sweeps: several configs x several seeds, summarised as CSV."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..data import Dataset
from ..model import Backbone, load_checkpoint
from .config import ConfigError, TrainConfig
from .metrics import evaluate_topk
from .train import build_from_config, pretrain_object_net, train

GAMMA_SWEEP = (0.0, 10.0, 1.0, 0.1, 0.01, 0.001)
REPORT_COLUMNS = ("config", "n_seeds", "top1_mean", "top1_std", "top5_mean", "top5_std",
                  "scl_mean", "scl_std")
RUN_COLUMNS = ("config", "seed", "top1", "top5", "mean_scl", "best_epoch")


@dataclass
class RunRecord:
    config: str
    seed: int
    top1: float
    top5: float
    mean_scl: float
    best_epoch: int = -1


def gamma_sweep(base: TrainConfig, gammas: Sequence[float] = GAMMA_SWEEP) -> list[TrainConfig]:
    return [base.replace(gamma=float(g), fusion_kind=None, label=f"gamma_{g:g}") for g in gammas]


def fusion_sweep(base: TrainConfig) -> list[TrainConfig]:
    """Every fusion kind at every level it is defined for.

    Score-level concat would not yield C scores, and score-level sum needs
    as many object classes as scene classes, so both are feature-only.
    """
    rows = []
    for kind in ("sum", "concat", "ccm", "ccg", "ccg_bn", "mixed_ccm_ccg"):
        rows.append(base.replace(fusion_kind=kind, fusion_level="feature", label=f"feature_{kind}"))
    for kind in ("ccm", "ccg", "ccg_bn", "mixed_ccm_ccg"):
        rows.append(base.replace(fusion_kind=kind, fusion_level="score", label=f"score_{kind}"))
    return rows


def _std(v) -> float:
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def summarise(records: Sequence[RunRecord]) -> list[dict]:
    order, groups = [], {}
    for r in records:
        if r.config not in groups:
            order.append(r.config)
            groups[r.config] = []
        groups[r.config].append(r)
    out = []
    for name in order:
        g = groups[name]
        t1 = [r.top1 for r in g]
        t5 = [r.top5 for r in g]
        scl = [r.mean_scl for r in g]
        out.append({"config": name, "n_seeds": len(g),
                    "top1_mean": float(np.mean(t1)), "top1_std": _std(t1),
                    "top5_mean": float(np.mean(t5)), "top5_std": _std(t5),
                    "scl_mean": float(np.mean(scl)), "scl_std": _std(scl)})
    return out


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r, dict) else getattr(r, c) for c in columns])
    return path


def _check_names(configs: Sequence[TrainConfig]) -> None:
    names = [c.name for c in configs]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"ablation configs need distinct labels, duplicated: {dup}")


def ablation_run(configs: Sequence[TrainConfig], ds: Dataset, seeds: Sequence[int] = (0, 1, 2),
                 out_dir=None, object_net: Optional[Backbone] = None,
                 object_cfg: Optional[TrainConfig] = None, log=None) -> list[dict]:
    """Train every config under every seed, then summarise val metrics of the
    best-val checkpoints.

    Fusion configs share one pretrained ObjectNet: ``object_net`` if given,
    otherwise one pretrained with ``object_cfg`` (default: the first fusion
    config's schedule).  Writes ``runs.csv`` and ``report.csv`` under
    ``out_dir`` when given.
    """
    _check_names(configs)
    out = Path(out_dir) if out_dir is not None else None
    if object_net is None and any(c.fusion_kind for c in configs):
        ocfg = object_cfg or next(c for c in configs if c.fusion_kind)
        object_net = pretrain_object_net(ds, ocfg, out / "object_net" if out is not None else None)
    records = []
    for cfg in configs:
        for seed in seeds:
            run_cfg = cfg.replace(seed=int(seed))
            a = build_from_config(run_cfg, ds, object_net if cfg.fusion_kind else None)
            run_dir = out / cfg.name / f"seed{seed}" if out is not None else None
            res = train(a, ds, run_cfg, run_dir)
            rec = RunRecord(cfg.name, int(seed), res.best.top1, res.best.top5, res.best.mean_scl, res.best_epoch)
            records.append(rec)
            if log is not None:
                log(f"{rec.config} seed={rec.seed} top1={rec.top1:.4f} top5={rec.top5:.4f} "
                    f"scl={rec.mean_scl:.4f}")
    report = summarise(records)
    if out is not None:
        write_csv(out / "runs.csv", RUN_COLUMNS, records)
        write_csv(out / "report.csv", REPORT_COLUMNS, report)
    return report


def report_from_checkpoints(out_dir, ds: Dataset, k: int = 5) -> list[dict]:
    """Rebuild the report by re-evaluating every saved checkpoint under
    ``out_dir/<config>/seed<k>/checkpoint``; no training."""
    out = Path(out_dir)
    records = []
    runs_csv = out / "runs.csv"
    if runs_csv.exists():
        with open(runs_csv) as fh:
            pairs = [(r["config"], int(r["seed"])) for r in csv.DictReader(fh)]
    else:
        pairs = sorted((p.parent.parent.name, int(p.parent.name[4:]))
                       for p in out.glob("*/seed*/checkpoint"))
    if not pairs:
        raise FileNotFoundError(f"no checkpoints under {out}")
    for name, seed in pairs:
        a, extra = load_checkpoint(out / name / f"seed{seed}" / "checkpoint")
        m = evaluate_topk(a, ds.val, min(k, ds.num_scenes), ds.mean, ds.std)
        records.append(RunRecord(name, seed, m.top1, m.top5, m.mean_scl, int(extra.get("epoch", -1))))
    return summarise(records)


def load_matrix(path) -> tuple[list[TrainConfig], list[int], Optional[TrainConfig]]:
    """Matrix JSON: ``{"base": {...}, "configs": [{...overrides}], "seeds": [0, 1, 2],
    "object_pretrain": {...}}``.  ``"configs"`` may also be the string
    ``"gamma_sweep"`` or ``"fusion_sweep"``."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"matrix file not found: {p}")
    with open(p) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
    base = TrainConfig.from_json(d.get("base", {}))
    spec = d.get("configs", "gamma_sweep")
    if spec == "gamma_sweep":
        configs = gamma_sweep(base, d.get("gammas", GAMMA_SWEEP))
    elif spec == "fusion_sweep":
        configs = fusion_sweep(base)
    elif isinstance(spec, list):
        configs = []
        for over in spec:
            merged = base.to_json()
            fusion = dict(merged.pop("fusion"))
            fusion.update(over.get("fusion", {}))
            merged.update({k: v for k, v in over.items() if k != "fusion"})
            merged["fusion"] = fusion
            configs.append(TrainConfig.from_json(merged))
    else:
        raise ConfigError(f"{p}: 'configs' must be a list, 'gamma_sweep' or 'fusion_sweep'")
    seeds = [int(s) for s in d.get("seeds", [0, 1, 2])]
    obj = d.get("object_pretrain")
    return configs, seeds, TrainConfig.from_json(obj) if obj is not None else None
