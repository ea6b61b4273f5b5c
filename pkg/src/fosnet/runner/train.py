"""Training loops: ObjectNet pretraining and PlacesNet / fusion training."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..data import Dataset, augment_batch, balanced_batches, normalize
from ..layers import DenseParams
from ..losses import objective
from ..model import (Backbone, BackboneSpec, FosNetAssembly, build_assembly, build_object_net, forward_fosnet,
                     save_backbone, save_checkpoint)
from ..tensor import (NonFiniteError, Tape, Tensor, backward, mul, no_grad, sigmoid_binary_cross_entropy,
                      softmax_cross_entropy)
from .config import TrainConfig, lr_at
from .metrics import Metrics, evaluate_topk, metrics_from_scores
from .optim import sgd_momentum_step

LOG_COLUMNS = ("epoch", "split", "loss_c", "loss_scl", "loss_total", "top1", "top5")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    history: list
    best: Metrics
    best_epoch: int
    final: Metrics
    checkpoint: Optional[Path] = None
    log_path: Optional[Path] = None
    extra: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


class CsvLog:
    """Append-only CSV writer; ``None`` path keeps rows in memory only."""

    def __init__(self, path: Optional[Path], columns=LOG_COLUMNS):
        self.path = Path(path) if path is not None else None
        self.columns = columns
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(columns)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in self.columns])


def training_rng(seed: int) -> np.random.Generator:
    # separate from the init stream that build_assembly derives from the same seed
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x7EA1]))


def build_from_config(cfg: TrainConfig, ds: Dataset, object_net: Optional[Backbone] = None) -> FosNetAssembly:
    """Fresh assembly for ``cfg``.  Fusion configs need ``object_net`` (the
    pretrained network, copied so the caller's instance is never mutated);
    without it a randomly initialised one with ``cfg.blocks`` is built."""
    if object_net is not None:
        object_net = _copy_backbone(object_net, cfg.dtype)
    object_spec = BackboneSpec(blocks=cfg.blocks, conv_kind="vanilla", head="gap_fc")
    a = build_assembly(cfg.backbone_spec, cfg.seed, ds.num_scenes, ds.num_objects,
                       fusion_kind=cfg.fusion_kind, fusion_level=cfg.fusion_level, fusion_bn=cfg.fusion_bn,
                       object_spec=object_spec, object_net=object_net, freeze_object_net=cfg.freeze_object_net,
                       dtype=cfg.dtype, ccm_relu=cfg.ccm_relu)
    if cfg.classifier_init == "places_head" and a.fusion is not None and a.fusion.classifier is not None:
        head, clf = a.places_net.head, a.fusion.classifier
        if head.weights.shape != clf.weights.shape:
            raise ValueError(f"classifier_init=places_head needs matching shapes, got "
                             f"{head.weights.shape} and {clf.weights.shape}")
        clf.weights.data[...] = head.weights.data
        clf.bias.data[...] = head.bias.data
    return a


def _copy_backbone(net: Backbone, dtype) -> Backbone:
    from ..model import _build_backbone
    out = _build_backbone(net.spec, net.num_classes, 0, dtype)
    for k, t in out.parameters().items():
        t.data[...] = net.parameters()[k].data
    src = net.buffers()
    for k, arr in out.buffers().items():
        arr[...] = src[k]
    return out


def _snapshot(a: FosNetAssembly) -> dict:
    snap = {k: v.data.copy() for k, v in a.all_tensors().items()}
    snap.update({f"buf:{k}": v.copy() for k, v in a.buffers().items()})
    return snap


def _restore(a: FosNetAssembly, snap: dict) -> None:
    for k, v in a.all_tensors().items():
        v.data[...] = snap[k]
    for k, arr in a.buffers().items():
        arr[...] = snap[f"buf:{k}"]


def train_step(a: FosNetAssembly, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, params: dict,
               state: dict, lr: float):
    """One SGD step.  Returns (loss breakdown, batch scores)."""
    use_scl = cfg.fusion_kind is None or cfg.scl_in_fusion
    with Tape():
        out = forward_fosnet(a, Tensor(x, dtype=a.dtype), training=True)
        ce = softmax_cross_entropy(out.scores, y)
        br = objective(ce, out.grid if use_scl else None, cfg.gamma)
        if not np.isfinite(br.total):
            raise TrainingDiverged(f"non-finite total loss {br.total}")
        backward(br.tensor)
    sgd_momentum_step(params, None, state, lr, cfg.momentum)
    return br, out.scores.data


def train(a: FosNetAssembly, ds: Dataset, cfg: TrainConfig, out_dir=None, restore_best: bool = True,
          eval_k: int = 5) -> TrainResult:
    """Balanced, augmented mini-batch training with per-epoch validation.

    Writes ``log.csv``, ``config.json`` and the best-val-top1 checkpoint
    (``checkpoint/``) under ``out_dir`` when given.  Ties in val top-1 keep
    the earlier epoch.
    """
    if a.places_net.num_classes != ds.num_scenes:
        raise ValueError(f"model predicts {a.places_net.num_classes} scenes, dataset has {ds.num_scenes}")
    if a.places_net.spec.input_hw != ds.train.images.shape[1:3]:
        raise ValueError(f"model input {a.places_net.spec.input_hw} vs images {ds.train.images.shape[1:3]}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump(cfg.to_json(), fh, indent=1)
    log = CsvLog(out / "log.csv" if out is not None else None)
    use_scl = cfg.fusion_kind is None or cfg.scl_in_fusion
    params = a.trainable_parameters(cfg.gamma, use_scl)
    state: dict = {}
    rng = training_rng(cfg.seed)
    k = min(eval_k, ds.num_scenes)
    best, best_epoch, best_snap, ckpt = None, -1, None, None
    final = None
    extra = {"mean": ds.mean.tolist(), "std": ds.std.tolist(), "config": cfg.to_json()}
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = np.zeros(3)
        scores, labels = [], []
        for idx in balanced_batches(ds.train.labels, cfg.batch_size, rng):
            x = augment_batch(ds.train.images[idx], rng, ds.mean, ds.std, enabled=cfg.augment,
                              flip=cfg.flip, scale_range=cfg.scale_range)
            y = ds.train.labels[idx]
            try:
                br, s = train_step(a, x, y, cfg, params, state, lr)
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}") from e
            sums += np.array([br.classification, br.coherence, br.total]) * len(idx)
            scores.append(s)
            labels.append(y)
        n = sum(len(y) for y in labels)
        tm = metrics_from_scores(np.concatenate(scores), np.concatenate(labels), k, num_classes=ds.num_scenes)
        lc, ls, lt = sums / n
        log.write({"epoch": epoch, "split": "train", "loss_c": lc, "loss_scl": ls, "loss_total": lt,
                   "top1": tm.top1, "top5": tm.top5})
        vm = evaluate_topk(a, ds.val, k, ds.mean, ds.std)
        vscl = vm.mean_scl if np.isfinite(vm.mean_scl) else 0.0
        log.write({"epoch": epoch, "split": "val", "loss_c": vm.loss_c, "loss_scl": vm.mean_scl,
                   "loss_total": vm.loss_c + (cfg.gamma * vscl if use_scl else 0.0),
                   "top1": vm.top1, "top5": vm.top5})
        final = vm
        if best is None or vm.top1 > best.top1:
            best, best_epoch = vm, epoch
            best_snap = _snapshot(a)
            if out is not None:
                ckpt = save_checkpoint(a, out / "checkpoint", dict(extra, epoch=epoch, val_top1=vm.top1))
    if restore_best and best_snap is not None:
        _restore(a, best_snap)
    return TrainResult(log.rows, best, best_epoch, final, ckpt, log.path)


# ----------------------------------------------------------------------------
# ObjectNet pretraining
# ----------------------------------------------------------------------------

PRETRAIN_COLUMNS = ("epoch", "split", "loss_bce", "label_acc")


def _object_eval(net: Backbone, images: np.ndarray, objects: np.ndarray, mean, std) -> tuple[float, float]:
    with no_grad():
        losses, correct = [], 0
        for s in range(0, len(images), 128):
            x = Tensor(normalize(images[s:s + 128], mean, std), dtype=net.head.weights.dtype)
            o = net(x, False).scores
            t = objects[s:s + 128].astype(o.dtype)
            losses.append(sigmoid_binary_cross_entropy(o, t).item() * t.shape[1] * len(t))
            correct += int(((o.data > 0) == (t > 0.5)).sum())
    return sum(losses) / len(images), correct / objects.size


def pretrain_object_net(ds: Dataset, cfg: TrainConfig, out_dir=None, net: Optional[Backbone] = None) -> Backbone:
    """Multi-label ObjectNet training with sigmoid cross-entropy on the
    multi-hot object annotations.  ``cfg.conv_kind``/``blocks`` select the
    backbone, the head is always GAP-FC."""
    if net is None:
        spec = BackboneSpec(blocks=cfg.blocks, conv_kind="vanilla", head="gap_fc")
        net = build_object_net(spec, np.random.SeedSequence([cfg.seed, 0x0B1E]), ds.num_objects, cfg.dtype)
    out = Path(out_dir) if out_dir is not None else None
    log = CsvLog(out / "log.csv" if out is not None else None, PRETRAIN_COLUMNS)
    params = net.parameters()
    state: dict = {}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0B1F]))
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        tot, n = 0.0, 0
        for idx in balanced_batches(ds.train.labels, cfg.batch_size, rng):
            x = augment_batch(ds.train.images[idx], rng, ds.mean, ds.std, enabled=cfg.augment,
                              flip=cfg.flip, scale_range=cfg.scale_range)
            t = ds.train.objects[idx].astype(cfg.dtype)
            with Tape():
                o = net(Tensor(x, dtype=cfg.dtype), True).scores
                # summed over labels, averaged over the batch
                loss = mul(sigmoid_binary_cross_entropy(o, t), float(ds.num_objects))
                backward(loss)
            sgd_momentum_step(params, None, state, lr, cfg.momentum)
            tot += loss.item() * len(idx)
            n += len(idx)
        tl, ta = _object_eval(net, ds.train.images, ds.train.objects, ds.mean, ds.std)
        log.write({"epoch": epoch, "split": "train", "loss_bce": tot / n, "label_acc": ta})
        vl, va = _object_eval(net, ds.val.images, ds.val.objects, ds.mean, ds.std)
        log.write({"epoch": epoch, "split": "val", "loss_bce": vl, "label_acc": va})
    if out is not None:
        save_backbone(net, out / "checkpoint", {"mean": ds.mean.tolist(), "std": ds.std.tolist()})
    return net


# ----------------------------------------------------------------------------
# trainability smoke test
# ----------------------------------------------------------------------------


def overfit_one_batch(a: FosNetAssembly, x: np.ndarray, y: np.ndarray, lr: float = 0.05,
                      momentum: float = 0.9, max_steps: int = 200, gamma: float = 1.0) -> tuple[int, float]:
    """Repeated SGD on one fixed batch.  Returns (steps taken, final
    training-mode top-1); stops at the first step whose forward pass already
    classifies the whole batch correctly."""
    cfg = TrainConfig(epochs=1, gamma=gamma, momentum=momentum,
                      fusion_kind=a.fusion.kind if a.fusion else None,
                      fusion_level=a.fusion.level if a.fusion else "feature")
    params = a.trainable_parameters(gamma, True)
    state: dict = {}
    acc = 0.0
    for step in range(max_steps):
        br, s = train_step(a, x, y, cfg, params, state, lr)
        acc = float((s.argmax(axis=1) == y).mean())
        if acc == 1.0:
            return step, acc
    return max_steps, acc
