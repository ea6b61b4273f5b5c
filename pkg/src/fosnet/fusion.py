"""Object/scene fusion heads.

Kinds: ``sum``, ``concat``, ``ccm`` (class conversion matrix, converted
object feature added to the scene feature), ``ccg`` (sigmoid gate computed
from the object feature, applied to the scene feature), ``ccg_bn`` (gate
pre-activation batch-normalised, no bias), and ``mixed_ccm_ccg`` (gate
applied to a linearly re-mapped scene feature).

Vectors are ``(D,)`` for one sample or ``(B, D)`` for a batch.  Weight
matrices are stored ``(out, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers import BNParams, DenseParams, batch_norm, dense, he_normal
from .tensor import ShapeError, Tensor, add, concat, matmul, mul, relu, sigmoid, transpose

KINDS = ("sum", "concat", "ccm", "ccg", "ccg_bn", "mixed_ccm_ccg")
LEVELS = ("feature", "score")


@dataclass
class FusionInputs:
    object_vec: Tensor
    scene_vec: Tensor


@dataclass
class FusionParams:
    kind: str
    level: str = "feature"
    W1: Optional[Tensor] = None
    b1: Optional[Tensor] = None
    W2: Optional[Tensor] = None
    b2: Optional[Tensor] = None
    bn: Optional[BNParams] = None
    bn2: Optional[BNParams] = None
    ccm_relu: bool = True
    classifier: Optional[DenseParams] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}; expected one of {KINDS}")
        if self.level not in LEVELS:
            raise ValueError(f"unknown fusion level {self.level!r}; expected one of {LEVELS}")
        if self.kind in ("ccm", "ccg", "mixed_ccm_ccg", "ccg_bn") and self.W1 is None:
            raise ValueError(f"{self.kind} fusion needs W1")
        if self.kind == "ccg_bn" and self.bn is None:
            raise ValueError("ccg_bn fusion needs batch-norm params")
        if self.kind == "mixed_ccm_ccg" and self.W2 is None:
            raise ValueError("mixed_ccm_ccg fusion needs W2")
        if self.kind in ("ccm", "ccg", "mixed_ccm_ccg") and self.bn is None and self.b1 is None:
            raise ValueError(f"{self.kind} fusion needs b1 (or bn)")
        if self.kind == "mixed_ccm_ccg" and self.bn2 is None and self.b2 is None:
            raise ValueError("mixed_ccm_ccg fusion needs b2 (or bn2)")
        if self.level == "score" and self.kind == "concat":
            raise ValueError("concat fusion is feature-level only: score-level output must have C entries")

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("W1", "b1", "W2", "b2"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        for name in ("bn", "bn2"):
            bn = getattr(self, name)
            if bn is not None:
                out[f"{name}.gamma"] = bn.gamma
                out[f"{name}.beta"] = bn.beta
        if self.classifier is not None:
            out["classifier.weights"] = self.classifier.weights
            out["classifier.bias"] = self.classifier.bias
        return out


def _linear(x: Tensor, W: Tensor, b: Optional[Tensor], op: str) -> Tensor:
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"{op}: input dim {x.shape[-1]} does not match W {W.shape}")
    y = matmul(x, transpose(W))
    return y if b is None else add(y, b)


def ccm_transform(object_vec: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Pseudo scene feature ``W x_object + b``."""
    return _linear(object_vec, W, b, "ccm_transform")


def _gate_mul(gate: Tensor, target: Tensor, op: str) -> Tensor:
    if gate.shape != target.shape:
        raise ShapeError(f"{op}: gate shape {gate.shape} does not match scene shape {target.shape}")
    return mul(gate, target)


def _bn(x: Tensor, bn: BNParams, training: bool) -> Tensor:
    if x.ndim == 1:
        return batch_norm(x.reshape(1, -1), bn, training).reshape(x.shape)
    return batch_norm(x, bn, training)


def ccg_fuse(inputs: FusionInputs, p: FusionParams) -> Tensor:
    gate = sigmoid(ccm_transform(inputs.object_vec, p.W1, p.b1))
    return _gate_mul(gate, inputs.scene_vec, "ccg_fuse")


def ccg_bn_fuse(inputs: FusionInputs, p: FusionParams, training: bool = False) -> Tensor:
    # no explicit bias: BN's beta plays that role
    pre = _bn(_linear(inputs.object_vec, p.W1, None, "ccg_bn_fuse"), p.bn, training)
    return _gate_mul(sigmoid(pre), inputs.scene_vec, "ccg_bn_fuse")


def mixed_ccm_ccg(inputs: FusionInputs, p: FusionParams, training: bool = False) -> Tensor:
    """``sigmoid(W1 x_obj + b1) * (W2 x_scene + b2)``.

    When ``p.bn``/``p.bn2`` are set, each linear branch is batch-normalised
    (without its bias) before the sigmoid and before the product respectively.
    """
    if p.bn is not None:
        gate_pre = _bn(_linear(inputs.object_vec, p.W1, None, "mixed_ccm_ccg"), p.bn, training)
    else:
        gate_pre = _linear(inputs.object_vec, p.W1, p.b1, "mixed_ccm_ccg")
    if p.bn2 is not None:
        target = _bn(_linear(inputs.scene_vec, p.W2, None, "mixed_ccm_ccg"), p.bn2, training)
    else:
        target = _linear(inputs.scene_vec, p.W2, p.b2, "mixed_ccm_ccg")
    return _gate_mul(sigmoid(gate_pre), target, "mixed_ccm_ccg")


def ccm_fuse(inputs: FusionInputs, p: FusionParams, training: bool = False) -> Tensor:
    if p.bn is not None:
        conv = _bn(_linear(inputs.object_vec, p.W1, None, "ccm_fuse"), p.bn, training)
    else:
        conv = ccm_transform(inputs.object_vec, p.W1, p.b1)
    if p.ccm_relu:
        conv = relu(conv)
    if conv.shape != inputs.scene_vec.shape:
        raise ShapeError(f"ccm_fuse: converted shape {conv.shape} vs scene {inputs.scene_vec.shape}")
    return add(conv, inputs.scene_vec)


def baseline_fuse(inputs: FusionInputs, p: FusionParams) -> Tensor:
    x_obj, x_scene = inputs.object_vec, inputs.scene_vec
    if p.kind == "sum":
        if x_obj.shape != x_scene.shape:
            raise ShapeError(f"sum fusion needs equal dimensions, got {x_obj.shape} and {x_scene.shape}")
        return add(x_obj, x_scene)
    if p.kind == "concat":
        return concat([x_obj, x_scene], axis=-1)
    raise ValueError(f"baseline_fuse handles sum/concat, not {p.kind!r}")


def fuse(inputs: FusionInputs, p: FusionParams, training: bool = False) -> Tensor:
    if p.kind in ("sum", "concat"):
        return baseline_fuse(inputs, p)
    if p.kind == "ccm":
        return ccm_fuse(inputs, p, training)
    if p.kind == "ccg":
        return ccg_fuse(inputs, p)
    if p.kind == "ccg_bn":
        return ccg_bn_fuse(inputs, p, training)
    return mixed_ccm_ccg(inputs, p, training)


def fuse_at_level(object_out: Tensor, scene_out: Tensor, p: FusionParams, training: bool = False) -> Tensor:
    """Fuse two stream outputs and return class scores.

    Score level: inputs are raw (pre-softmax) class scores and the fused
    vector is used directly as the scene scores.  Feature level: inputs are
    pooled features and ``p.classifier`` maps the fused vector to scores.
    """
    if p.level == "score" and p.kind == "sum" and object_out.shape[-1] != scene_out.shape[-1]:
        raise ShapeError(
            f"score-level sum needs equal class counts, got {object_out.shape[-1]} object "
            f"and {scene_out.shape[-1]} scene classes")
    fused = fuse(FusionInputs(object_out, scene_out), p, training)
    if p.level == "score":
        return fused
    if p.classifier is None:
        raise ValueError("feature-level fusion needs a classifier")
    return dense(fused, p.classifier)


def fused_dim(kind: str, obj_dim: int, scene_dim: int) -> int:
    return obj_dim + scene_dim if kind == "concat" else scene_dim


def init_fusion(kind: str, level: str, obj_dim: int, scene_dim: int, num_classes: int,
                rng: np.random.Generator, dtype=np.float64, bn: bool = False,
                ccm_relu: bool = True) -> FusionParams:
    """Fresh fusion params.  ``bn`` adds batch norm to ccm / mixed branches
    (ccg_bn always has it)."""
    if kind == "sum" and obj_dim != scene_dim:
        raise ShapeError(f"sum fusion needs equal dimensions, got {obj_dim} and {scene_dim}")

    def w(d_out, d_in):
        return Tensor(he_normal(rng, (d_out, d_in), d_in, dtype), requires_grad=True, dtype=dtype)

    def zeros(d):
        return Tensor(np.zeros(d), requires_grad=True, dtype=dtype)

    kw = {}
    gate_bn = kind == "ccg_bn" or (bn and kind in ("ccm", "mixed_ccm_ccg"))
    if kind in ("ccm", "ccg", "ccg_bn", "mixed_ccm_ccg"):
        kw["W1"] = w(scene_dim, obj_dim)
        # a batch-normalised branch takes its bias from BN's beta
        if gate_bn:
            kw["bn"] = BNParams.init(scene_dim, dtype)
        else:
            kw["b1"] = zeros(scene_dim)
    if kind == "mixed_ccm_ccg":
        kw["W2"] = w(scene_dim, scene_dim)
        if bn:
            kw["bn2"] = BNParams.init(scene_dim, dtype)
        else:
            kw["b2"] = zeros(scene_dim)
    classifier = None
    if level == "feature":
        classifier = DenseParams.init(fused_dim(kind, obj_dim, scene_dim), num_classes, rng, dtype)
    return FusionParams(kind=kind, level=level, ccm_relu=ccm_relu, classifier=classifier, **kw)
