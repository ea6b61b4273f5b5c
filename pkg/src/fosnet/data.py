"""Synthetic scene dataset, augmentation and class-balanced batching.

Each image is a scene-wide oriented texture (the scene class is visible in
every region of the image) overlaid with small object glyphs whose presence
is drawn from a per-scene co-occurrence table (objects hint at the scene).
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

from . import fost

INDEX_VERSION = 1


def default_cooccurrence(num_objects: int = 6, num_scenes: int = 8) -> np.ndarray:
    """(num_objects, num_scenes) placement probabilities.

    Scene s has signature object ``s % num_objects`` at 0.8 and two shared
    background objects at 0.3.
    """
    c = np.zeros((num_objects, num_scenes))
    extra = [(3, 5), (2, 4)]
    for s in range(num_scenes):
        sig = s % num_objects
        c[sig, s] = 0.8
        if s < num_objects:
            bg = ((s + 1) % num_objects, (s + 2) % num_objects)
        else:
            bg = extra[(s - num_objects) % len(extra)]
        for o in bg:
            if o != sig:
                c[o, s] = 0.3
    return c


def default_textures(num_scenes: int = 8) -> list[dict]:
    # four colour families x two stripe orientations; families are close
    # enough that colour alone is ambiguous under per-image jitter
    palette = [(0.55, 0.45, 0.35), (0.40, 0.55, 0.40), (0.40, 0.45, 0.60), (0.55, 0.50, 0.50)]
    out = []
    for s in range(num_scenes):
        out.append({
            "base_color": list(palette[s % len(palette)]),
            "orientation": (np.pi / 4) * (s // len(palette)) + (np.pi / 8) * (s % 2),
            "frequency": 0.12 + 0.04 * (s % 3),
            "stripe_amplitude": 0.12,
            "noise_amplitude": 0.08,
        })
    return out


def default_object_styles(num_objects: int = 6) -> list[dict]:
    shapes = ("square", "circle", "triangle")
    colors = [(0.95, 0.15, 0.15), (0.15, 0.85, 0.2), (0.15, 0.25, 0.95),
              (0.95, 0.9, 0.1), (0.9, 0.2, 0.9), (0.1, 0.9, 0.9)]
    return [{"shape": shapes[o % 3], "color": list(colors[o % len(colors)])} for o in range(num_objects)]


@dataclass
class SyntheticSceneSpec:
    num_scenes: int = 8
    num_objects: int = 6
    image_hw: tuple = (32, 32)
    channels: int = 3
    samples_per_scene: int = 500
    val_per_scene: int = 100
    glyph_size: tuple = (6, 10)
    color_jitter: float = 0.06
    texture_params: list = field(default_factory=default_textures)
    object_styles: list = field(default_factory=default_object_styles)
    cooccurrence: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.cooccurrence is None:
            self.cooccurrence = default_cooccurrence(self.num_objects, self.num_scenes)
        self.cooccurrence = np.asarray(self.cooccurrence, dtype=np.float64)
        self.image_hw = tuple(self.image_hw)
        self.glyph_size = tuple(self.glyph_size)
        c = self.cooccurrence
        if c.shape != (self.num_objects, self.num_scenes):
            raise ValueError(f"cooccurrence must be {self.num_objects}x{self.num_scenes}, got {c.shape}")
        if ((c < 0) | (c > 1)).any():
            raise ValueError("cooccurrence entries are placement probabilities in [0, 1]")
        if not (c.max(axis=0) > 0.5).all():
            raise ValueError("every scene needs an object with placement probability > 0.5")
        if (c > 0).sum(axis=0).max() > 3:
            raise ValueError("at most 3 objects per scene may have non-zero probability")
        if len(self.texture_params) < self.num_scenes or len(self.object_styles) < self.num_objects:
            raise ValueError("texture_params / object_styles too short for the class counts")

    def to_json(self) -> dict:
        return {
            "num_scenes": self.num_scenes, "num_objects": self.num_objects,
            "image_hw": list(self.image_hw), "channels": self.channels,
            "samples_per_scene": self.samples_per_scene, "val_per_scene": self.val_per_scene,
            "glyph_size": list(self.glyph_size), "color_jitter": self.color_jitter,
            "texture_params": self.texture_params, "object_styles": self.object_styles,
            "cooccurrence": self.cooccurrence.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSceneSpec":
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    scene: int
    objects: np.ndarray  # multi-hot, length num_objects


@dataclass
class Split:
    images: np.ndarray  # (n, H, W, 3)
    labels: np.ndarray  # (n,) scene index
    objects: np.ndarray  # (n, num_objects) multi-hot

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.objects[i])

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx], self.labels[idx], self.objects[idx])


@dataclass
class Dataset:
    train: Split
    val: Split
    mean: np.ndarray  # per-channel statistics of the raw train images
    std: np.ndarray
    num_scenes: int
    num_objects: int
    spec: Optional[SyntheticSceneSpec] = None


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------


def _glyph_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        r = size / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    # upward triangle
    return np.abs(xx - size / 2) <= yy / 2


def _render(spec: SyntheticSceneSpec, scene: int, objects: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_hw
    tp = spec.texture_params[scene]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = tp["orientation"]
    phase = rng.uniform(0, 2 * np.pi)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    stripes = tp["stripe_amplitude"] * np.sin(2 * np.pi * tp["frequency"] * proj + phase)
    base = np.asarray(tp["base_color"]) + rng.normal(0, spec.color_jitter, size=3)
    img = base[None, None, :] + stripes[:, :, None]
    img = img + rng.normal(0, tp["noise_amplitude"], size=(h, w, spec.channels))
    lo, hi = spec.glyph_size
    for o in np.flatnonzero(objects):
        style = spec.object_styles[o]
        size = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        mask = _glyph_mask(style["shape"], size)
        patch = img[top:top + size, left:left + size]
        patch[mask] = np.asarray(style["color"])
    return np.clip(img, 0.0, 1.0)


def _assign_objects(spec: SyntheticSceneSpec, scene: int, n: int, rng: np.random.Generator) -> np.ndarray:
    # stratified: exactly round(p * n) images of this scene carry object o
    out = np.zeros((n, spec.num_objects), dtype=np.int64)
    for o in range(spec.num_objects):
        k = int(round(spec.cooccurrence[o, scene] * n))
        if k:
            out[rng.choice(n, size=k, replace=False), o] = 1
    return out


def _generate_split(spec: SyntheticSceneSpec, per_scene: int, rng: np.random.Generator) -> Split:
    images, labels, objs = [], [], []
    for s in range(spec.num_scenes):
        assign = _assign_objects(spec, s, per_scene, rng)
        for i in range(per_scene):
            images.append(_render(spec, s, assign[i], rng))
            labels.append(s)
            objs.append(assign[i])
    return Split(np.stack(images), np.asarray(labels, dtype=np.int64), np.stack(objs))


def generate_dataset(spec: SyntheticSceneSpec, seed: int) -> Dataset:
    """Deterministic train/val splits for ``seed``."""
    root = np.random.SeedSequence(seed)
    train_ss, val_ss = root.spawn(2)
    train = _generate_split(spec, spec.samples_per_scene, np.random.default_rng(train_ss))
    val = _generate_split(spec, spec.val_per_scene, np.random.default_rng(val_ss))
    mean, std = channel_stats(train.images)
    return Dataset(train, val, mean, std, spec.num_scenes, spec.num_objects, spec)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = images.reshape(-1, images.shape[-1])
    return flat.mean(axis=0), flat.std(axis=0)


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------


def rescale(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize of an (H, W, C) image by ``factor``."""
    if factor == 1.0:
        return image
    h, w, _ = image.shape
    out_hw = (int(round(h * factor)), int(round(w * factor)))
    zoom = (out_hw[0] / h, out_hw[1] / w, 1.0)
    return ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    return (image - mean) / std


def augment(image: np.ndarray, rng: np.random.Generator, mean=None, std=None,
            scale_range=(1.0, 1.25), flip: bool = True, crop_hw=None,
            force_scale: Optional[float] = None, force_flip: Optional[bool] = None,
            crop_offset: Optional[tuple] = None) -> np.ndarray:
    """Random rescale, random crop back to ``crop_hw``, optional horizontal
    flip (p=0.5), then per-channel normalisation if ``mean``/``std`` given.

    ``force_*`` / ``crop_offset`` pin the random choices (testing, 10-crop).
    A :class:`Sample` comes back as a Sample with its labels untouched.
    """
    if isinstance(image, Sample):
        out = augment(image.image, rng, mean, std, scale_range, flip, crop_hw, force_scale, force_flip,
                      crop_offset)
        return Sample(out, image.scene, image.objects.copy())
    crop_hw = crop_hw or image.shape[:2]
    factor = force_scale if force_scale is not None else rng.uniform(*scale_range)
    big = rescale(image, factor)
    bh, bw = big.shape[:2]
    ch, cw = crop_hw
    if crop_offset is None:
        top = int(rng.integers(0, bh - ch + 1))
        left = int(rng.integers(0, bw - cw + 1))
    elif crop_offset == "center":
        top, left = (bh - ch) // 2, (bw - cw) // 2
    else:
        top, left = crop_offset
    out = big[top:top + ch, left:left + cw]
    do_flip = force_flip if force_flip is not None else (flip and rng.random() < 0.5)
    if do_flip:
        out = hflip(out)
    if mean is not None:
        out = normalize(out, mean, std)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, mean, std, enabled: bool = True,
                  flip: bool = True, scale_range=(1.0, 1.25)) -> np.ndarray:
    if not enabled:
        return normalize(images, mean, std)
    return np.stack([augment(im, rng, mean, std, scale_range=scale_range, flip=flip) for im in images])


# ----------------------------------------------------------------------------
# balanced sampling
# ----------------------------------------------------------------------------


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of class-balanced mini-batches (index arrays).

    Every class contributes the same number of samples per epoch (the minority
    class count; larger classes are subsampled afresh each epoch).  Samples
    are dealt round-robin over classes in a random class order per round, so
    within any batch per-class counts differ by at most one.  A trailing
    batch of size one is merged into the previous batch.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if batch_size > len(labels):
        raise ValueError(f"batch size {batch_size} exceeds split size {len(labels)}")
    if batch_size < len(classes):
        warnings.warn(f"batch size {batch_size} < {len(classes)} classes: balance holds per epoch only",
                      stacklevel=2)
    per_class = min(int((labels == c).sum()) for c in classes)
    pools = [rng.permutation(np.flatnonzero(labels == c))[:per_class] for c in classes]
    order = []
    for r in range(per_class):
        for ci in rng.permutation(len(classes)):
            order.append(pools[ci][r])
    order = np.asarray(order, dtype=np.int64)
    bounds = list(range(0, len(order), batch_size))
    batches = [order[b:b + batch_size] for b in bounds]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    yield from batches


# ----------------------------------------------------------------------------
# disk I/O
# ----------------------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    index = {
        "version": INDEX_VERSION,
        "num_scenes": ds.num_scenes,
        "num_objects": ds.num_objects,
        "channel_mean": ds.mean.tolist(),
        "channel_std": ds.std.tolist(),
        "splits": {},
    }
    if ds.spec is not None:
        index["spec"] = ds.spec.to_json()
    for name, split in (("train", ds.train), ("val", ds.val)):
        entries = []
        for i in range(len(split)):
            rel = f"images/{name}_{i:05d}.fost"
            fost.save(root / rel, split.images[i])
            entries.append({"file": rel, "scene": int(split.labels[i]),
                            "objects": [int(v) for v in split.objects[i]]})
        index["splits"][name] = entries
    with open(root / "index.json", "w") as fh:
        json.dump(index, fh, indent=1)


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    if index.get("version") != INDEX_VERSION:
        raise DatasetFormatError(f"{index_path}: unsupported index version {index.get('version')}")
    splits = {}
    for name in ("train", "val"):
        entries = index["splits"][name]
        images = [fost.load(root / e["file"]) for e in entries]
        splits[name] = Split(np.stack(images), np.asarray([e["scene"] for e in entries], dtype=np.int64),
                             np.asarray([e["objects"] for e in entries], dtype=np.int64))
    spec = SyntheticSceneSpec.from_json(index["spec"]) if "spec" in index else None
    return Dataset(splits["train"], splits["val"], np.asarray(index["channel_mean"]),
                   np.asarray(index["channel_std"]), index["num_scenes"], index["num_objects"], spec)
