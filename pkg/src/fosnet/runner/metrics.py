"""Top-k metrics, single-crop and 10-crop evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Split, normalize, rescale
from ..losses import scene_coherence_loss
from ..model import FosNetAssembly, forward_fosnet
from ..tensor import Tensor, no_grad


@dataclass
class Metrics:
    top1: float
    top5: float
    mean_scl: float
    per_class: np.ndarray
    confusion: np.ndarray
    n: int
    k: int = 5
    loss_c: float = float("nan")
    forward_passes: int = 0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"top1": self.top1, "top5": self.top5, "mean_scl": self.mean_scl, "n": self.n}


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row.  Equal scores rank the lower
    class index first."""
    # stable sort on the negated scores keeps index order among ties
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def metrics_from_scores(scores: np.ndarray, labels: np.ndarray, k: int = 5, mean_scl: float = float("nan"),
                        num_classes: int = None) -> Metrics:
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    c = num_classes or scores.shape[-1]
    if not 1 <= k <= c:
        raise ValueError(f"k={k} must be in [1, {c}]")
    top = topk_indices(scores, k)
    hit1 = top[:, 0] == labels
    hitk = (top == labels[:, None]).any(axis=1)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, top[:, 0]), 1)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), np.nan)
    loss_c = float(-log_softmax(scores)[np.arange(len(labels)), labels].mean()) if len(labels) else float("nan")
    return Metrics(float(hit1.mean()), float(hitk.mean()), mean_scl, per_class, confusion,
                   len(labels), k, loss_c)


def _batches(n: int, batch_size: int):
    for s in range(0, n, batch_size):
        yield slice(s, min(n, s + batch_size))


def evaluate_topk(a: FosNetAssembly, split: Split, k: int = 5, mean=None, std=None,
                  batch_size: int = 128) -> Metrics:
    """Single centre-crop evaluation in inference mode.

    ``mean``/``std`` normalise raw images; pass ``None`` if the split is
    already normalised.
    """
    scores, scl_sum, passes = [], 0.0, 0
    with no_grad():
        for sl in _batches(len(split), batch_size):
            x = split.images[sl]
            if mean is not None:
                x = normalize(x, mean, std)
            out = forward_fosnet(a, Tensor(x, dtype=a.dtype), training=False)
            passes += x.shape[0]
            scores.append(out.scores.data)
            if out.grid is not None:
                scl_sum += scene_coherence_loss(out.grid).item() * x.shape[0]
    has_grid = a.places_net.spec.head == "conv1x1_gap"
    mean_scl = scl_sum / len(split) if has_grid else float("nan")
    m = metrics_from_scores(np.concatenate(scores), split.labels, k, mean_scl, a.places_net.num_classes)
    m.forward_passes = passes
    return m


def ten_crops(image: np.ndarray, scale: float = 1.25) -> list[np.ndarray]:
    """Four corners and the centre of the ``scale``-upsampled image, each
    with its horizontal flip; crops keep the original size."""
    h, w = image.shape[:2]
    big = rescale(image, scale)
    bh, bw = big.shape[:2]
    offsets = [(0, 0), (0, bw - w), (bh - h, 0), (bh - h, bw - w), ((bh - h) // 2, (bw - w) // 2)]
    crops = []
    for top, left in offsets:
        c = np.ascontiguousarray(big[top:top + h, left:left + w])
        crops.append(c)
        crops.append(np.ascontiguousarray(c[:, ::-1]))
    return crops


def ten_crop_eval(a: FosNetAssembly, split: Split, k: int = 5, mean=None, std=None,
                  scale: float = 1.25) -> Metrics:
    """Mean of the ten crops' softmax vectors per sample."""
    probs, scl_sum, passes = [], 0.0, 0
    with no_grad():
        for i in range(len(split)):
            crops = np.stack(ten_crops(split.images[i], scale))
            if mean is not None:
                crops = normalize(crops, mean, std)
            out = forward_fosnet(a, Tensor(crops, dtype=a.dtype), training=False)
            passes += crops.shape[0]
            probs.append(softmax(out.scores.data).mean(axis=0))
            if out.grid is not None:
                scl_sum += scene_coherence_loss(out.grid).item()
    has_grid = a.places_net.spec.head == "conv1x1_gap"
    p = np.stack(probs)
    # rank on averaged probabilities; the loss column uses log of the mean
    m = metrics_from_scores(np.log(np.maximum(p, 1e-300)), split.labels, k,
                            scl_sum / len(split) if has_grid else float("nan"), a.places_net.num_classes)
    m.forward_passes = passes
    m.extra["probabilities"] = p
    return m
