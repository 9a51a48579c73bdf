"""Fusion architecture: image branch + metadata MLP + shared classifier.

The image branch is a small conv stack chosen by preset; each preset echoes
one classic backbone signature at desk scale:

    plain-scaled  3 stages of widening strided 3x3 convs (compound-scaled stack)
    residual      the same widening stages with parameter-free shortcuts plus
                  an identity-skip residual block per stage
    plain-deep    4 stages of plain 3x3 convs (deep small-filter stack)

Global average pooling turns the final stage into the image feature vector.
The metadata branch is a two-layer MLP (default 3 -> 12 -> 8) with the
x*sigmoid(x) activation after both layers.  Fusion concatenates both feature
vectors before a single shared linear classifier over the 14 labels; the
image-only baseline classifies the image features alone.

Residual stages use pre-activation skips, y = skip(x) + swish(conv(x)).
Downsampling stages carry a parameter-free shortcut (2x2 average pool plus
channel replication), so with all-zero conv weights the whole branch reduces
to pooled input, which the tests pin down.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .errors import ConfigError, ModeError, ShapeError
from .labels import N_PATHOLOGIES, MetaFeatureConfig, encode_metadata_batch
from .tensor import (Tape, Tensor, add, affine, avg_pool2, concat, conv2d,
                     global_avg_pool, repeat_channels, swish)

def sigmoid(x: np.ndarray) -> np.ndarray:
    """Stable elementwise logistic function on raw arrays."""
    from .tensor import _sigmoid
    return _sigmoid(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class ConvStage:
    """One backbone stage.

    kind: "plain"      y = swish(conv(x))
          "down_skip"  y = replicate(avg_pool(x)) + swish(conv(x)); needs
                       kernel 3, stride 2, pad 1 and out_channels a multiple
                       of in_channels
          "res"        y = x + swish(conv(x)); shape-preserving, channels equal
    """

    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    kind: str = "plain"


@dataclass(frozen=True)
class BackbonePreset:
    name: str
    stages: Tuple[ConvStage, ...]
    input_size: int = 32
    in_channels: int = 1

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].out_channels

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError(f"preset {self.name!r} has no stages")
        c_in = self.in_channels
        size = self.input_size
        for i, st in enumerate(self.stages):
            if st.kind not in ("plain", "down_skip", "res"):
                raise ConfigError(f"stage {i}: unknown kind {st.kind!r}")
            if st.kernel > size + 2 * st.pad:
                raise ConfigError(f"stage {i}: kernel exceeds padded input")
            if st.kind == "res":
                if st.out_channels != c_in or st.stride != 1 \
                        or st.kernel != 2 * st.pad + 1:
                    raise ConfigError(
                        f"stage {i}: res stage must preserve shape and channels")
            if st.kind == "down_skip":
                if (st.kernel, st.stride, st.pad) != (3, 2, 1):
                    raise ConfigError(
                        f"stage {i}: down_skip requires kernel 3, stride 2, pad 1")
                if st.out_channels % c_in:
                    raise ConfigError(
                        f"stage {i}: down_skip channels {st.out_channels} not a "
                        f"multiple of {c_in}")
                if size % 2:
                    raise ConfigError(f"stage {i}: down_skip needs even input size")
            size = (size + 2 * st.pad - st.kernel) // st.stride + 1
            c_in = st.out_channels

    def to_dict(self) -> dict:
        return {"name": self.name, "input_size": self.input_size,
                "in_channels": self.in_channels,
                "stages": [vars(s) | {} for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "BackbonePreset":
        return cls(name=d["name"],
                   stages=tuple(ConvStage(**s) for s in d["stages"]),
                   input_size=d.get("input_size", 32),
                   in_channels=d.get("in_channels", 1))


def _widening(kind_mid: str) -> Tuple[ConvStage, ...]:
    down = "down_skip" if kind_mid == "res" else "plain"
    stages: List[ConvStage] = []
    for ch in (8, 16, 32):
        stages.append(ConvStage(ch, 3, 2, 1, kind=down))
        if kind_mid == "res":
            stages.append(ConvStage(ch, 3, 1, 1, kind="res"))
    return tuple(stages)


PRESETS: Dict[str, BackbonePreset] = {
    "plain-scaled": BackbonePreset("plain-scaled", _widening("plain")),
    "residual": BackbonePreset("residual", _widening("res")),
    "plain-deep": BackbonePreset("plain-deep", (
        ConvStage(8, 3, 1, 1), ConvStage(16, 3, 2, 1),
        ConvStage(32, 3, 2, 1), ConvStage(32, 3, 2, 1))),
}


@dataclass(frozen=True)
class MetaBranchConfig:
    input_dim: int = 3
    hidden_dim: int = 12
    output_dim: int = 8

    def validate(self) -> None:
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ConfigError("meta branch dims must be >= 1")

    def to_dict(self) -> dict:
        return vars(self) | {}

    @classmethod
    def from_dict(cls, d: dict) -> "MetaBranchConfig":
        return cls(**d)


class FusionModel:
    """Parameter container plus forward passes for both modes."""

    def __init__(self, preset: BackbonePreset,
                 meta_branch: Optional[MetaBranchConfig],
                 meta_features: Optional[MetaFeatureConfig],
                 params: Dict[str, Tensor]):
        self.preset = preset
        self.meta_branch = meta_branch
        self.meta_features = meta_features
        self.params = params

    @property
    def mode(self) -> str:
        return "fusion" if self.meta_branch is not None else "image-only"

    def param_list(self) -> List[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "FusionModel":
        return FusionModel(self.preset, self.meta_branch, self.meta_features,
                           {k: v.copy() for k, v in self.params.items()})


def _param_shapes(preset: BackbonePreset,
                  meta: Optional[MetaBranchConfig]) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    c_in = preset.in_channels
    for i, st in enumerate(preset.stages):
        shapes.append((f"backbone.s{i}.w", (st.out_channels, c_in, st.kernel, st.kernel)))
        c_in = st.out_channels
    head_in = preset.feature_dim
    if meta is not None:
        shapes.append(("meta.fc1.w", (meta.hidden_dim, meta.input_dim)))
        shapes.append(("meta.fc1.b", (meta.hidden_dim,)))
        shapes.append(("meta.fc2.w", (meta.output_dim, meta.hidden_dim)))
        shapes.append(("meta.fc2.b", (meta.output_dim,)))
        head_in += meta.output_dim
    shapes.append(("head.w", (N_PATHOLOGIES, head_in)))
    shapes.append(("head.b", (N_PATHOLOGIES,)))
    return shapes


def build_model(preset: BackbonePreset,
                meta: Optional[MetaBranchConfig] = None,
                seed: int = 0,
                meta_features: Optional[MetaFeatureConfig] = None) -> FusionModel:
    """Deterministically initialize a model from (preset, meta, seed).

    Weights are Kaiming-uniform with fan-in scaling, U(-b, b) with
    b = sqrt(6 / fan_in); biases start at zero.  Identical inputs give
    bit-identical parameters.
    """
    preset.validate()
    if meta is not None:
        meta.validate()
        if meta_features is None:
            meta_features = MetaFeatureConfig()
        if meta_features.width() != meta.input_dim:
            raise ConfigError(
                f"meta feature width {meta_features.width()} != "
                f"meta branch input_dim {meta.input_dim}")
    elif meta_features is not None:
        raise ConfigError("meta_features given without a meta branch")
    gen = rng.stream(seed, "init", preset.name)
    params: Dict[str, Tensor] = {}
    for name, shape in _param_shapes(preset, meta):
        if name.endswith(".b"):
            params[name] = Tensor(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = Tensor(gen.uniform(-bound, bound, shape))
    return FusionModel(preset, meta, meta_features, params)


def forward_image_branch(m: FusionModel, image: Tensor,
                         tape: Optional[Tape] = None) -> Tensor:
    """Conv stages then global average pooling -> (feature_dim,) or (N, F)."""
    expected = (m.preset.in_channels, m.preset.input_size, m.preset.input_size)
    shape = image.data.shape
    if shape[-3:] != expected or image.data.ndim not in (3, 4):
        raise ShapeError(f"image shape {shape} does not end in {expected}")
    x = image
    c_in = m.preset.in_channels
    for i, st in enumerate(m.preset.stages):
        w = m.params[f"backbone.s{i}.w"]
        main = swish(conv2d(x, w, stride=st.stride, pad=st.pad, tape=tape), tape=tape)
        if st.kind == "plain":
            x = main
        elif st.kind == "res":
            x = add(x, main, tape=tape)
        else:  # down_skip
            skip = avg_pool2(x, tape=tape)
            reps = st.out_channels // c_in
            if reps > 1:
                skip = repeat_channels(skip, reps, tape=tape)
            x = add(skip, main, tape=tape)
        c_in = st.out_channels
    return global_avg_pool(x, tape=tape)


def forward_meta_branch(m: FusionModel, v: Tensor,
                        tape: Optional[Tape] = None) -> Tensor:
    """Two swish-activated fully connected layers -> (output_dim,) or (N, D)."""
    if m.meta_branch is None:
        raise ModeError("meta branch called on an image-only model")
    h = swish(affine(v, m.params["meta.fc1.w"], m.params["meta.fc1.b"], tape=tape),
              tape=tape)
    return swish(affine(h, m.params["meta.fc2.w"], m.params["meta.fc2.b"], tape=tape),
                 tape=tape)


def forward(m: FusionModel, image: Tensor, v: Optional[Tensor] = None,
            tape: Optional[Tape] = None) -> Tensor:
    """Raw logits over the 14 labels; no output activation."""
    if m.mode == "fusion" and v is None:
        raise ModeError("fusion model requires a metadata vector")
    if m.mode == "image-only" and v is not None:
        raise ModeError("image-only model does not accept metadata")
    feats = forward_image_branch(m, image, tape=tape)
    if v is not None:
        feats = concat(feats, forward_meta_branch(m, v, tape=tape), tape=tape)
    return affine(feats, m.params["head.w"], m.params["head.b"], tape=tape)


def predict_scores(m: FusionModel, samples: Sequence,
                   batch_size: int = 256) -> np.ndarray:
    """sigmoid(logits) for a list of dataset samples, shape (n, 14)."""
    out = np.empty((len(samples), N_PATHOLOGIES))
    need_meta = m.mode == "fusion"
    if need_meta and m.meta_features is None:
        raise ConfigError("fusion model lacks a metadata feature config")
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        images = Tensor(np.stack([s.image for s in chunk]))
        v = None
        if need_meta:
            v = Tensor(encode_metadata_batch([s.metadata for s in chunk],
                                             m.meta_features))
        logits = forward(m, images, v)
        out[lo:lo + len(chunk)] = sigmoid(logits.data)
    return out


# ---------------------------------------------------------------------------
# checkpoint I/O: versioned JSON, bit-exact parameter round-trip
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "cxrfusion-checkpoint"
_CKPT_VERSION = 1


def checkpoint_dict(m: FusionModel) -> dict:
    return {
        "format": _CKPT_FORMAT,
        "version": _CKPT_VERSION,
        "preset": m.preset.to_dict(),
        "meta_branch": None if m.meta_branch is None else m.meta_branch.to_dict(),
        "meta_features": None if m.meta_features is None else m.meta_features.to_dict(),
        "params": {
            name: {
                "shape": list(p.data.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(p.data, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, p in m.params.items()
        },
    }


def save_checkpoint(m: FusionModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(checkpoint_dict(m), sort_keys=True,
                            separators=(",", ":")))
        fh.write("\n")


def load_checkpoint(path: str) -> FusionModel:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != _CKPT_FORMAT:
        raise ConfigError(f"{path}: not a {_CKPT_FORMAT} file")
    if d.get("version") != _CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {d.get('version')}")
    preset = BackbonePreset.from_dict(d["preset"])
    meta = None if d["meta_branch"] is None else MetaBranchConfig.from_dict(d["meta_branch"])
    feats = None if d["meta_features"] is None else MetaFeatureConfig.from_dict(d["meta_features"])
    params: Dict[str, Tensor] = {}
    for name, spec in d["params"].items():
        raw = base64.b64decode(spec["data"])
        arr = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).copy()
        params[name] = Tensor(arr)
    expected = [n for n, _ in _param_shapes(preset, meta)]
    if sorted(expected) != sorted(params):
        raise ConfigError(f"{path}: parameter names do not match model config")
    return FusionModel(preset, meta, feats, params)
