"""Permutation-invariant skeleton feature extractor.

Each joint token passes through the same per-point network G (a stem layer
followed by residual bottleneck MLP blocks); the clip feature is the
channel-wise maximum over all tokens. Because G never mixes tokens and max is
symmetric, the output does not depend on token order, token multiplicity or
the number of persons in the clip.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from skelprompt import autodiff as ad
from skelprompt.autodiff import ParamStore, Tensor
from skelprompt.errors import ShapeError
from skelprompt.skeleton_data import TOKEN_DIM, TokenCloud

PREFIX = "extractor"

# Bounds peak memory of batched inference; the per-row arithmetic is unaffected.
_INFERENCE_CHUNK_ROWS = 16384


@dataclass(frozen=True)
class ExtractorConfig:
    stem_width: int = 64
    block_widths: tuple[int, ...] = (64, 128, 256)
    bottleneck_ratio: float = 0.25
    activation: str = "relu"
    norm: str = "layer"
    input_dim: int = TOKEN_DIM

    def __post_init__(self) -> None:
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        if not self.block_widths:
            raise ValueError("need at least one residual block")
        if self.stem_width < 1 or min(self.block_widths) < 1:
            raise ValueError("all widths must be >= 1")
        if not 0.0 < self.bottleneck_ratio <= 1.0:
            raise ValueError(f"bottleneck_ratio must be in (0, 1], got {self.bottleneck_ratio}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.norm != "layer":
            raise ValueError(f"unsupported norm {self.norm!r}")

    @property
    def feature_dim(self) -> int:
        return self.block_widths[-1]

    def bottleneck_width(self, d_out: int) -> int:
        return max(1, math.ceil(self.bottleneck_ratio * d_out))

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {
            f"{PREFIX}.stem.W": (self.stem_width, self.input_dim),
            f"{PREFIX}.stem.norm.gain": (1, self.stem_width),
            f"{PREFIX}.stem.norm.bias": (1, self.stem_width),
        }
        d_in = self.stem_width
        for i, d_out in enumerate(self.block_widths):
            hidden = self.bottleneck_width(d_out)
            p = f"{PREFIX}.block{i}"
            if d_in != d_out:
                shapes[f"{p}.W1"] = (d_out, d_in)
            shapes[f"{p}.W2"] = (hidden, d_in)
            shapes[f"{p}.norm2.gain"] = (1, hidden)
            shapes[f"{p}.norm2.bias"] = (1, hidden)
            shapes[f"{p}.W3"] = (hidden, hidden)
            shapes[f"{p}.norm3.gain"] = (1, hidden)
            shapes[f"{p}.norm3.bias"] = (1, hidden)
            shapes[f"{p}.W4"] = (d_out, hidden)
            shapes[f"{p}.norm4.gain"] = (1, d_out)
            shapes[f"{p}.norm4.bias"] = (1, d_out)
            d_in = d_out
        return shapes

    def to_dict(self) -> dict:
        return {
            "stem_width": self.stem_width,
            "block_widths": list(self.block_widths),
            "bottleneck_ratio": self.bottleneck_ratio,
            "activation": self.activation,
            "norm": self.norm,
            "input_dim": self.input_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExtractorConfig:
        return cls(**{**d, "block_widths": tuple(d["block_widths"])})


@dataclass(frozen=True)
class SkeletonFeature:
    x: np.ndarray
    source: str
    label: str | None = None


def init_extractor(store: ParamStore, config: ExtractorConfig, rng: np.random.Generator) -> None:
    """Add freshly initialized extractor parameters to ``store``."""
    for name, shape in config.param_shapes().items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, math.sqrt(2.0 / shape[1]), size=shape)
        store.add(name, value)


def check_params(store: ParamStore, config: ExtractorConfig) -> None:
    for name, shape in config.param_shapes().items():
        if name not in store:
            raise ShapeError(f"missing extractor parameter {name!r}")
        if store[name].shape != shape:
            raise ShapeError(f"parameter {name!r} has shape {store[name].shape}, config expects {shape}")


def _residual_block(u: Tensor, store: ParamStore, p: str, has_projection: bool) -> Tensor:
    h = ad.layer_normalize(ad.affine(u, store[f"{p}.W2"]), store[f"{p}.norm2.gain"], store[f"{p}.norm2.bias"])
    h = ad.relu(h)
    h = ad.layer_normalize(ad.affine(h, store[f"{p}.W3"]), store[f"{p}.norm3.gain"], store[f"{p}.norm3.bias"])
    h = ad.relu(h)
    h = ad.layer_normalize(ad.affine(h, store[f"{p}.W4"]), store[f"{p}.norm4.gain"], store[f"{p}.norm4.bias"])
    shortcut = ad.affine(u, store[f"{p}.W1"]) if has_projection else u
    return ad.relu(ad.add(h, shortcut))


def encode_rows(rows: Tensor, store: ParamStore, config: ExtractorConfig) -> Tensor:
    """Apply the per-joint network G to every row of a (J, 7) token matrix."""
    if rows.cols != config.input_dim:
        raise ShapeError(f"tokens have {rows.cols} columns, extractor expects {config.input_dim}")
    s = f"{PREFIX}.stem"
    u = ad.relu(ad.layer_normalize(ad.affine(rows, store[f"{s}.W"]), store[f"{s}.norm.gain"], store[f"{s}.norm.bias"]))
    d_in = config.stem_width
    for i, d_out in enumerate(config.block_widths):
        u = _residual_block(u, store, f"{PREFIX}.block{i}", d_in != d_out)
        d_in = d_out
    return u


def encode_joint(v: np.ndarray, store: ParamStore, config: ExtractorConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    check_params(store, config)
    with ad.no_grad():
        return encode_rows(ad.constant(v), store, config).data[0].copy()


def encode_batch(clouds: Sequence[TokenCloud], store: ParamStore, config: ExtractorConfig) -> Tensor:
    """Taped (B, S) feature matrix for a batch of clouds (used in training)."""
    if not clouds:
        raise ShapeError("empty batch")
    tokens = np.concatenate([c.tokens for c in clouds], axis=0)
    per_joint = encode_rows(ad.constant(tokens), store, config)
    return ad.segment_max_pool(per_joint, [len(c) for c in clouds])


def encode_features(clouds: Sequence[TokenCloud], store: ParamStore, config: ExtractorConfig) -> np.ndarray:
    """Untaped (B, S) feature matrix, processed in row-bounded chunks."""
    check_params(store, config)
    out = np.empty((len(clouds), config.feature_dim))
    with ad.no_grad():
        start = 0
        while start < len(clouds):
            stop, rows = start, 0
            while stop < len(clouds) and (stop == start or rows + len(clouds[stop]) <= _INFERENCE_CHUNK_ROWS):
                rows += len(clouds[stop])
                stop += 1
            out[start:stop] = encode_batch(clouds[start:stop], store, config).data
            start = stop
    return out


def encode_clip(cloud: TokenCloud, store: ParamStore, config: ExtractorConfig) -> SkeletonFeature:
    """Clip feature: channel-wise max of G over all joint tokens."""
    return SkeletonFeature(encode_features([cloud], store, config)[0], cloud.source, cloud.label)
