"""Miniature ObjectNet / PlacesNet backbones and the fused FOSNet assembly."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fost
from .fusion import FusionParams, fuse_at_level, init_fusion
from .layers import (BNParams, ConvParams, DenseParams, PartialConvPlan, batch_norm, build_partial_plan,
                     conv1x1_head, conv2d_zero_pad, dense, global_avg_pool, partial_conv2d)
from .tensor import ShapeError, Tensor, mean, no_grad, relu

CONV_KINDS = ("vanilla", "partial")
HEADS = ("gap_fc", "conv1x1_gap")


@dataclass
class BackboneSpec:
    input_hw: tuple = (32, 32)
    in_channels: int = 3
    blocks: tuple = ((16, 2), (32, 2), (64, 2))
    conv_kind: str = "partial"
    head: str = "conv1x1_gap"
    kernel: int = 3

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.blocks = tuple((int(c), int(s)) for c, s in self.blocks)
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        total = int(np.prod([s for _, s in self.blocks]))
        if any(v % total for v in self.input_hw):
            raise ValueError(f"stride product {total} does not divide input {self.input_hw}")

    @property
    def grid_hw(self) -> tuple:
        total = int(np.prod([s for _, s in self.blocks]))
        return tuple(v // total for v in self.input_hw)

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1][0]

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["blocks"] = [list(b) for b in self.blocks]
        return d


@dataclass
class Block:
    """conv3x3 (vanilla or partial) -> BN -> ReLU."""

    conv: ConvParams
    bn: BNParams
    input_hw: tuple
    plan: Optional[PartialConvPlan] = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = partial_conv2d(x, self.conv, self.plan) if self.plan is not None else conv2d_zero_pad(x, self.conv)
        return relu(batch_norm(y, self.bn, training))


@dataclass
class BackboneOutput:
    scores: Tensor  # (B, C) image-level class scores
    feature: Tensor  # (B, D) pooled last-layer feature
    grid: Optional[Tensor]  # (B, N, M, C) per-cell scores, conv1x1_gap head only
    last: Tensor  # (B, N, M, D)


@dataclass
class Backbone:
    spec: BackboneSpec
    blocks: list
    head: DenseParams
    num_classes: int

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        if tuple(x.shape[-3:-1]) != self.spec.input_hw:
            raise ShapeError(f"image {x.shape} does not match backbone input {self.spec.input_hw}")
        for blk in self.blocks:
            x = blk(x, training)
        return x

    def __call__(self, x: Tensor, training: bool = False) -> BackboneOutput:
        last = self.features(x, training)
        pooled = global_avg_pool(last)
        if self.spec.head == "conv1x1_gap":
            grid = conv1x1_head(last, self.head)
            scores = mean(grid, axis=(-3, -2))
        else:
            grid = None
            scores = dense(pooled, self.head)
        return BackboneOutput(scores, pooled, grid, last)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.conv.weights"] = blk.conv.weights
            out[f"block{i}.conv.bias"] = blk.conv.bias
            out[f"block{i}.bn.gamma"] = blk.bn.gamma
            out[f"block{i}.bn.beta"] = blk.bn.beta
        out["head.weights"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.bn.running_mean"] = blk.bn.running_mean
            out[f"block{i}.bn.running_var"] = blk.bn.running_var
        return out


def parameter_count(spec: BackboneSpec, num_classes: int) -> int:
    """Closed-form trainable parameter count: conv weights + bias + BN affine per block, then the head."""
    total, d_in = 0, spec.in_channels
    for d_out, _ in spec.blocks:
        total += spec.kernel * spec.kernel * d_in * d_out + d_out + 2 * d_out
        d_in = d_out
    return total + d_in * num_classes + num_classes


def _build_backbone(spec: BackboneSpec, num_classes: int, seed, dtype) -> Backbone:
    rng = np.random.default_rng(seed)
    blocks = []
    hw, d_in = spec.input_hw, spec.in_channels
    for d_out, stride in spec.blocks:
        conv = ConvParams.init(spec.kernel, d_in, d_out, rng, stride=stride, dtype=dtype)
        plan = build_partial_plan(hw, conv) if spec.conv_kind == "partial" else None
        blocks.append(Block(conv, BNParams.init(d_out, dtype), hw, plan))
        hw, d_in = conv.output_hw(hw), d_out
    head = DenseParams.init(d_in, num_classes, rng, dtype)
    return Backbone(spec, blocks, head, num_classes)


def build_places_net(spec: Optional[BackboneSpec] = None, seed=0, num_classes: int = 8,
                     dtype=np.float64) -> Backbone:
    """Scene stream; the default head emits per-cell grid scores."""
    return _build_backbone(spec or BackboneSpec(), num_classes, seed, dtype)


def build_object_net(spec: Optional[BackboneSpec] = None, seed=0, num_classes: int = 6,
                     dtype=np.float64) -> Backbone:
    """Object stream; emits the pooled object feature and object scores."""
    spec = spec or BackboneSpec(conv_kind="vanilla", head="gap_fc")
    return _build_backbone(spec, num_classes, seed, dtype)


# ----------------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------------


@dataclass
class FosNetOutput:
    scores: Tensor
    grid: Optional[Tensor]
    diagnostics: dict = field(default_factory=dict)


@dataclass
class FosNetAssembly:
    """PlacesNet, optionally fused with ObjectNet.  Without ``fusion`` the
    scene scores come straight from PlacesNet."""

    places_net: Backbone
    object_net: Optional[Backbone] = None
    fusion: Optional[FusionParams] = None
    freeze_object_net: bool = False

    def __post_init__(self):
        if self.fusion is not None and self.object_net is None:
            raise ValueError("fusion needs an object net")

    def parameters(self, trainable_only: bool = True) -> dict[str, Tensor]:
        out = {f"places.{k}": v for k, v in self.places_net.parameters().items()}
        if self.object_net is not None and self.fusion is not None:
            if not (trainable_only and self.freeze_object_net):
                out.update({f"object.{k}": v for k, v in self.object_net.parameters().items()})
        if self.fusion is not None:
            out.update({f"fusion.{k}": v for k, v in self.fusion.parameters().items()})
        return out

    def trainable_parameters(self, gamma: float = 1.0, scl_enabled: bool = True) -> dict[str, Tensor]:
        """Parameters that receive a gradient from the training objective.

        Feature-level fusion never uses the object classifier head, and uses
        the PlacesNet head only through the coherence term.
        """
        params = self.parameters(trainable_only=True)
        if self.fusion is not None and self.fusion.level == "feature":
            for k in ("object.head.weights", "object.head.bias"):
                params.pop(k, None)
            if gamma == 0 or not scl_enabled or self.places_net.spec.head != "conv1x1_gap":
                for k in ("places.head.weights", "places.head.bias"):
                    params.pop(k, None)
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"places.{k}": v for k, v in self.places_net.buffers().items()}
        if self.object_net is not None:
            out.update({f"object.{k}": v for k, v in self.object_net.buffers().items()})
        if self.fusion is not None:
            for name in ("bn", "bn2"):
                bn = getattr(self.fusion, name)
                if bn is not None:
                    out[f"fusion.{name}.running_mean"] = bn.running_mean
                    out[f"fusion.{name}.running_var"] = bn.running_var
        return out

    def all_tensors(self) -> dict[str, Tensor]:
        out = self.parameters(trainable_only=False)
        if self.object_net is not None and self.fusion is None:
            out.update({f"object.{k}": v for k, v in self.object_net.parameters().items()})
        return out

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Inference-mode scene scores for a batch of normalised images."""
        with no_grad():
            return forward_fosnet(self, Tensor(images, dtype=self.dtype), training=False).scores.data

    @property
    def dtype(self):
        return self.places_net.head.weights.dtype


def forward_fosnet(a: FosNetAssembly, image: Tensor, training: bool = False) -> FosNetOutput:
    """Scene scores, the PlacesNet grid and per-stream outputs for one image
    (H, W, 3) or a batch (B, H, W, 3)."""
    single = image.ndim == 3
    if single:
        image = image.reshape((1,) + image.shape)
    scene = a.places_net(image, training)
    diag = {"scene_scores": scene.scores, "scene_feature": scene.feature}
    if a.fusion is None:
        scores = scene.scores
    else:
        if a.freeze_object_net:
            with no_grad():
                obj = a.object_net(image, False)
        else:
            obj = a.object_net(image, training)
        diag["object_scores"] = obj.scores
        diag["object_feature"] = obj.feature
        if a.fusion.level == "feature":
            scores = fuse_at_level(obj.feature, scene.feature, a.fusion, training)
        else:
            scores = fuse_at_level(obj.scores, scene.scores, a.fusion, training)
    grid = scene.grid
    if single:
        scores = scores.reshape(scores.shape[1:])
        grid = grid.reshape(grid.shape[1:]) if grid is not None else None
    return FosNetOutput(scores, grid, diag)


def build_assembly(places_spec: BackboneSpec, seed, num_scenes: int = 8, num_objects: int = 6,
                   fusion_kind: Optional[str] = None, fusion_level: str = "feature", fusion_bn: bool = False,
                   object_spec: Optional[BackboneSpec] = None, object_net: Optional[Backbone] = None,
                   freeze_object_net: bool = False, dtype=np.float64, ccm_relu: bool = True) -> FosNetAssembly:
    ss = np.random.SeedSequence(seed)
    s_places, s_object, s_fusion = ss.spawn(3)
    places = build_places_net(places_spec, s_places, num_scenes, dtype)
    if fusion_kind is None:
        return FosNetAssembly(places)
    if object_net is None:
        object_net = build_object_net(object_spec, s_object, num_objects, dtype)
    if fusion_level == "feature":
        d_obj, d_scene = object_net.spec.feature_dim, places.spec.feature_dim
    else:
        d_obj, d_scene = object_net.num_classes, num_scenes
    fusion = init_fusion(fusion_kind, fusion_level, d_obj, d_scene, num_scenes,
                         np.random.default_rng(s_fusion), dtype, bn=fusion_bn, ccm_relu=ccm_relu)
    return FosNetAssembly(places, object_net, fusion, freeze_object_net)


# ----------------------------------------------------------------------------
# class activation maps
# ----------------------------------------------------------------------------


@dataclass
class CamResult:
    heatmap: np.ndarray  # (N, M) in [0, 1]
    raw: np.ndarray  # (N, M) per-cell scores for the class
    lo: float
    hi: float
    degenerate: bool


def export_cam_grid(grid, class_idx: int) -> CamResult:
    """Min-max normalised score plane of one class; a flat plane maps to 0.5."""
    g = np.asarray(getattr(grid, "data", grid))
    if g.ndim != 3:
        raise ShapeError(f"export_cam_grid: expected an (N, M, C) grid, got {g.shape}")
    if not 0 <= class_idx < g.shape[-1]:
        raise IndexError(f"class index {class_idx} out of range for {g.shape[-1]} classes")
    raw = g[:, :, class_idx].astype(np.float64)
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return CamResult(np.full(raw.shape, 0.5), raw, lo, hi, True)
    return CamResult((raw - lo) / (hi - lo), raw, lo, hi, False)


def write_pgm(path, heatmap: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    h, w = heatmap.shape
    px = np.clip(np.round(heatmap * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = parts[4]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_cam(out_prefix, cam: CamResult) -> tuple[Path, Path]:
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    pgm, csv = out_prefix.with_suffix(".pgm"), out_prefix.with_suffix(".csv")
    write_pgm(pgm, cam.heatmap)
    with open(csv, "w") as fh:
        fh.write(f"# lo={cam.lo!r} hi={cam.hi!r} degenerate={int(cam.degenerate)}\n")
        for row in cam.raw:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return pgm, csv


def read_cam_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _arch(a: FosNetAssembly) -> dict:
    arch = {
        "places_spec": a.places_net.spec.to_json(),
        "num_scenes": a.places_net.num_classes,
        "dtype": str(a.dtype),
        "freeze_object_net": a.freeze_object_net,
    }
    if a.object_net is not None:
        arch["object_spec"] = a.object_net.spec.to_json()
        arch["num_objects"] = a.object_net.num_classes
    if a.fusion is not None:
        arch["fusion"] = {"kind": a.fusion.kind, "level": a.fusion.level,
                          "bn": a.fusion.bn is not None and a.fusion.kind != "ccg_bn",
                          "ccm_relu": a.fusion.ccm_relu}
    return arch


def _write_manifest(root: Path, kind: str, arch: dict, items: dict, extra: Optional[dict]) -> Path:
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in sorted(items.items()):
        rel = f"tensors/{name}.fost"
        fost.save(root / rel, arr)
        entries.append({"name": name, "file": rel, "shape": list(arr.shape)})
    manifest = {"format": kind, "version": CHECKPOINT_VERSION, "arch": arch,
                "tensors": entries, "extra": extra or {}}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return root


def _read_manifest(path, kind: str) -> tuple[Path, dict]:
    p = Path(path)
    mpath = p / "manifest.json" if p.is_dir() else p
    if p.is_dir() and not mpath.exists() and (p / "checkpoint" / "manifest.json").exists():
        # a training run directory; its checkpoint sits one level down
        mpath = p / "checkpoint" / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != kind or manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{mpath}: not a version-{CHECKPOINT_VERSION} {kind} manifest")
    return mpath, manifest


def _fill(mpath: Path, manifest: dict, tensors: dict, buffers: dict) -> None:
    for e in manifest["tensors"]:
        arr = fost.load(mpath.parent / e["file"])
        name = e["name"]
        if name in tensors:
            target = tensors[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise ValueError(f"{mpath}: unexpected tensor {name!r}")
        if target.shape != arr.shape:
            raise ShapeError(f"{mpath}: tensor {name!r} has shape {arr.shape}, expected {target.shape}")
        target[...] = arr


def save_checkpoint(a: FosNetAssembly, path, extra: Optional[dict] = None) -> Path:
    """Manifest JSON plus one FOST file per tensor."""
    items = {k: v.data for k, v in a.all_tensors().items()}
    items.update(a.buffers())
    return _write_manifest(Path(path), "fosnet-checkpoint", _arch(a), items, extra)


def save_backbone(net: Backbone, path, extra: Optional[dict] = None) -> Path:
    items = {k: v.data for k, v in net.parameters().items()}
    items.update(net.buffers())
    arch = {"spec": net.spec.to_json(), "num_classes": net.num_classes, "dtype": str(net.head.weights.dtype)}
    return _write_manifest(Path(path), "fosnet-backbone", arch, items, extra)


def load_backbone(path) -> tuple[Backbone, dict]:
    mpath, manifest = _read_manifest(path, "fosnet-backbone")
    arch = manifest["arch"]
    net = _build_backbone(BackboneSpec(**arch["spec"]), arch["num_classes"], 0, np.dtype(arch["dtype"]))
    _fill(mpath, manifest, net.parameters(), net.buffers())
    return net, manifest.get("extra", {})


def _backbone_spec(d: dict) -> BackboneSpec:
    return BackboneSpec(**d)


def load_checkpoint(path) -> tuple[FosNetAssembly, dict]:
    mpath, manifest = _read_manifest(path, "fosnet-checkpoint")
    arch = manifest["arch"]
    dtype = np.dtype(arch["dtype"])
    fusion = arch.get("fusion")
    object_net = None
    if "object_spec" in arch:
        object_net = build_object_net(_backbone_spec(arch["object_spec"]), 0, arch["num_objects"], dtype)
    a = build_assembly(_backbone_spec(arch["places_spec"]), 0, arch["num_scenes"], arch.get("num_objects", 6),
                       fusion_kind=fusion["kind"] if fusion else None,
                       fusion_level=fusion["level"] if fusion else "feature",
                       fusion_bn=fusion["bn"] if fusion else False,
                       object_net=object_net, freeze_object_net=arch["freeze_object_net"], dtype=dtype,
                       ccm_relu=fusion["ccm_relu"] if fusion else True)
    a.object_net = object_net
    _fill(mpath, manifest, a.all_tensors(), a.buffers())
    return a, manifest.get("extra", {})
