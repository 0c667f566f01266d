"""Bag classifier: convolutional patch embedding, max fusion, FC head.

Each patch is reduced to ``input_side`` pixels by area averaging, embedded by
a small VGG-style stack (3x3 conv, ReLU, 2x2 max-pool per block, then a
global spatial max), the instance embeddings are fused by an elementwise max
over the bag, and two ReLU layers plus a softmax classifier turn the fused
vector into class probabilities.  A single cell is scored as a bag of one.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .imaging import PatchImage

CONV_TAPS = ("conv", "post-fusion-conv")
FC1_TAPS = ("fc1",)
EMBED_CHUNK = 64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ConfigError("backbone needs at least one conv block")
        if self.input_side % (self.pool ** len(self.channels)):
            raise ConfigError(
                f"input_side {self.input_side} not divisible by {self.pool}^{len(self.channels)}"
            )

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


@dataclass
class ModelParams:
    classes: tuple[str, ...]
    backbone: BackboneConfig
    head_widths: tuple[int, ...]
    tensors: "OrderedDict[str, T.Parameter]" = field(repr=False)
    # per-channel input standardisation, applied after scaling pixels to [0, 1]
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_mean = np.asarray(self.input_mean, dtype=np.float32).reshape(3)
        self.input_std = np.asarray(self.input_std, dtype=np.float32).reshape(3)
        if np.any(self.input_std <= 0):
            raise ConfigError("input_std must be positive")

    @property
    def n_blocks(self) -> int:
        return len(self.backbone.channels)

    def parameters(self) -> list[T.Parameter]:
        return list(self.tensors.values())

    def __getitem__(self, name: str) -> T.Parameter:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        tensors = OrderedDict((k, T.Parameter(v.data, name=k, dtype=v.dtype)) for k, v in self.tensors.items())
        return ModelParams(self.classes, self.backbone, self.head_widths, tensors,
                           self.input_mean.copy(), self.input_std.copy(), dict(self.metadata))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.tensors.items())

    def load_state(self, state) -> None:
        for k, v in state.items():
            self.tensors[k].assign(v)


@dataclass
class BagPrediction:
    probabilities: np.ndarray
    provenance: np.ndarray  # per fused feature: index of the winning instance


def param_shapes(classes: Sequence[str], backbone: BackboneConfig, head_widths=(256, 64)):
    shapes = []
    c_in = 3
    for i, c_out in enumerate(backbone.channels):
        shapes.append((f"conv{i}.weight", (c_out, c_in, backbone.kernel, backbone.kernel)))
        shapes.append((f"conv{i}.bias", (c_out,)))
        c_in = c_out
    widths = [backbone.feature_dim, *head_widths, len(classes)]
    for i in range(len(widths) - 1):
        shapes.append((f"fc{i + 1}.weight", (widths[i], widths[i + 1])))
        shapes.append((f"fc{i + 1}.bias", (widths[i + 1],)))
    return shapes


def init_params(classes: Sequence[str], backbone: BackboneConfig = BackboneConfig(),
                head_widths: Sequence[int] = (256, 64), seed: int = 0) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    classes = tuple(classes)
    if len(classes) < 2:
        raise ConfigError("need at least two classes")
    if len(set(classes)) != len(classes):
        raise ConfigError(f"duplicate class names in {classes}")
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(classes, backbone, tuple(head_widths)):
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = T.Parameter(arr, name=name)
    return ModelParams(classes, backbone, tuple(int(w) for w in head_widths), tensors)


# ---------------------------------------------------------------------------
# input preparation


@lru_cache(maxsize=16)
def _area_matrix(src: int, dst: int) -> np.ndarray:
    """``dst x src`` matrix averaging source pixels by overlap length."""
    scale = src / dst
    m = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    m /= scale
    m.setflags(write=False)
    return m


def downscale(pixels: np.ndarray, side: int) -> np.ndarray:
    """Area-average a square ``uint8`` image to ``side`` x ``side`` (rounded to ``uint8``)."""
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    if h == side and w == side:
        return np.ascontiguousarray(pixels, dtype=np.uint8)
    rows, cols = _area_matrix(h, side), _area_matrix(w, side)
    out = np.einsum("ij,jkc,lk->ilc", rows, pixels.astype(np.float64), cols, optimize=True)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def prepare(patch, side: int) -> np.ndarray:
    pixels = patch.pixels if isinstance(patch, PatchImage) else patch
    return downscale(pixels, side)


def to_input(batch: np.ndarray, params: ModelParams | None = None) -> np.ndarray:
    """``uint8 [N, s, s, 3]`` -> ``float32 [N, 3, s, s]``.

    Pixels are scaled to ``[0, 1]`` and then standardised with the model's
    per-channel statistics (identity for freshly initialised models).
    """
    x = np.ascontiguousarray(batch.transpose(0, 3, 1, 2), dtype=np.float32) / np.float32(255.0)
    if params is not None:
        x = (x - params.input_mean[None, :, None, None]) / params.input_std[None, :, None, None]
    return x


def channel_stats(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of ``uint8 [..., 3]`` pixels scaled to ``[0, 1]``."""
    flat = np.asarray(inputs, dtype=np.float64).reshape(-1, 3) / 255.0
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-3)
    return mean.astype(np.float32), std.astype(np.float32)


# ---------------------------------------------------------------------------
# forward pieces


def backbone_forward(x: T.Tensor, params: ModelParams) -> T.Tensor:
    """``[N, 3, s, s]`` -> ``[N, n_f]``."""
    for i in range(params.n_blocks):
        x = T.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=1,
                     padding=params.backbone.kernel // 2)
        x = T.relu(x)
        x = T.max_pool2d(x, params.backbone.pool)
    return T.global_max_pool(x)


def embed_inputs(inputs: np.ndarray, params: ModelParams) -> T.Tensor:
    """Embed a stack of prepared ``uint8`` inputs ``[N, s, s, 3]``."""
    return backbone_forward(T.Tensor._wrap(to_input(inputs, params)), params)


def embed_patch(patch, params: ModelParams) -> np.ndarray:
    """Feature vector (length ``n_f``) of one patch."""
    x = prepare(patch, params.backbone.input_side)[None]
    return embed_inputs(x, params).data[0].copy()


def fuse(features) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise max over a list of feature vectors; returns (fused, provenance)."""
    if len(features) == 0:
        raise T.EmptyBagError("cannot fuse an empty bag")
    fused, argmax = T.max_reduce_instances(T.Tensor(np.stack([np.asarray(f) for f in features])))
    return fused.data.copy(), argmax


def head_logits(fused: T.Tensor, params: ModelParams) -> tuple[T.Tensor, T.Tensor]:
    """Returns (logits, first hidden activation)."""
    n_layers = len(params.head_widths) + 1
    h = fused
    first = None
    for i in range(1, n_layers):
        h = T.relu(T.affine(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
        if first is None:
            first = h
    logits = T.affine(h, params[f"fc{n_layers}.weight"], params[f"fc{n_layers}.bias"])
    return logits, first


def head_layers(fused: T.Tensor, params: ModelParams) -> tuple[T.Tensor, T.Tensor]:
    """Returns (probabilities, first hidden activation)."""
    logits, first = head_logits(fused, params)
    return T.softmax(logits), first


def head_forward(fused, params: ModelParams) -> np.ndarray:
    fused = fused if isinstance(fused, T.Tensor) else T.Tensor(fused)
    if fused.shape[-1] != params.backbone.feature_dim:
        raise T.DimensionError(
            f"head expects {params.backbone.feature_dim} fused features, got {fused.shape[-1]}"
        )
    return head_layers(fused, params)[0].data.copy()


def _canonical(inputs: list[np.ndarray]):
    """Distinct inputs in content-hash order, plus the first original index of each.

    Embedding in this order makes the result independent of bag order and
    duplication, even though BLAS results depend on batch composition.
    """
    first: dict[bytes, int] = {}
    for i, x in enumerate(inputs):
        first.setdefault(hashlib.blake2b(x.tobytes(), digest_size=16).digest(), i)
    keys = sorted(first)
    return [first[k] for k in keys]


def embed_bag(inputs: list[np.ndarray], params: ModelParams) -> tuple[np.ndarray, list[int]]:
    order = _canonical(inputs)
    chunks = []
    for s in range(0, len(order), EMBED_CHUNK):
        batch = np.stack([inputs[i] for i in order[s:s + EMBED_CHUNK]])
        chunks.append(embed_inputs(batch, params).data)
    return np.concatenate(chunks), order


def predict_inputs(inputs: list[np.ndarray], params: ModelParams) -> BagPrediction:
    if len(inputs) == 0:
        raise T.EmptyBagError("cannot classify an empty bag")
    feats, order = embed_bag(inputs, params)
    fused, argmax = T.max_reduce_instances(T.Tensor._wrap(feats))
    probs = head_layers(fused, params)[0].data.copy()
    return BagPrediction(probs, np.asarray(order)[argmax])


def predict_bag(patches, params: ModelParams) -> BagPrediction:
    """Sample-level class probabilities for a bag of patches."""
    side = params.backbone.input_side
    return predict_inputs([prepare(p, side) for p in patches], params)


def score_cell(patch, params: ModelParams) -> np.ndarray:
    """Class probabilities of one cell, scored as a bag of one."""
    return predict_bag([patch], params).probabilities


def score_inputs_batched(inputs: np.ndarray, params: ModelParams) -> np.ndarray:
    """Singleton-bag probabilities for many prepared inputs at once.

    Equivalent to :func:`score_cell` per row up to float32 rounding (BLAS
    batching changes the last bits); used for bulk cell scoring.
    """
    out = []
    for s in range(0, len(inputs), EMBED_CHUNK):
        feats = embed_inputs(inputs[s:s + EMBED_CHUNK], params)
        out.append(head_layers(feats, params)[0].data)
    return np.concatenate(out)


def extract_embedding(patch, params: ModelParams, layer: str = "conv") -> np.ndarray:
    """Backbone features (``conv``) or first hidden FC activation (``fc1``) of one patch."""
    feats = embed_patch(patch, params)
    if layer in CONV_TAPS:
        return feats
    if layer in FC1_TAPS:
        return head_layers(T.Tensor._wrap(feats), params)[1].data.copy()
    raise ConfigError(f"unknown embedding layer {layer!r}; expected one of {CONV_TAPS + FC1_TAPS}")


def embed_inputs_batched(inputs: np.ndarray, params: ModelParams, layer: str = "conv") -> np.ndarray:
    if layer not in CONV_TAPS + FC1_TAPS:
        raise ConfigError(f"unknown embedding layer {layer!r}; expected one of {CONV_TAPS + FC1_TAPS}")
    out = []
    for s in range(0, len(inputs), EMBED_CHUNK):
        feats = embed_inputs(inputs[s:s + EMBED_CHUNK], params)
        out.append(feats.data if layer in CONV_TAPS else head_layers(feats, params)[1].data)
    return np.concatenate(out)


def bag_loss(inputs: np.ndarray, target: int, params: ModelParams):
    """Forward pass for training; call inside a :class:`~leukomil.tensor.Tape`.

    Returns (loss, probabilities, fusion argmax).
    """
    feats = embed_inputs(inputs, params)
    fused, argmax = T.max_reduce_instances(feats)
    logits, _ = head_logits(fused, params)
    loss, probs = T.softmax_cross_entropy(logits, target)
    return loss, probs, argmax
