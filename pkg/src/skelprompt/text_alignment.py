"""Prompt embeddings and the projection of skeleton features into text space.

The built-in text encoder is a hashed bag-of-words: tokens are lower-cased
alphanumeric runs, each hashed into a fixed-size embedding table, mean-pooled
and passed through one affine layer. It exists so that the whole pipeline can
be trained and run without an external language model; embeddings produced by
any other encoder can be imported through the embedding JSON format.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from skelprompt import autodiff as ad
from skelprompt.autodiff import ParamStore, Tensor
from skelprompt.errors import PromptError, ShapeError

MODES = ("abnormal", "normal")
_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TextConfig:
    hash_size: int = 4096
    embed_dim: int = 64
    proj_hidden: int = 128

    def __post_init__(self) -> None:
        if min(self.hash_size, self.embed_dim, self.proj_hidden) < 1:
            raise ValueError("text config sizes must be >= 1")

    def to_dict(self) -> dict:
        return {"hash_size": self.hash_size, "embed_dim": self.embed_dim, "proj_hidden": self.proj_hidden}

    @classmethod
    def from_dict(cls, d: dict) -> TextConfig:
        return cls(**d)


@dataclass(frozen=True)
class PromptSet:
    prompts: tuple[str, ...]
    embeddings: np.ndarray
    mode: str = "abnormal"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PromptError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.prompts) < 1:
            raise PromptError("a prompt set needs at least one prompt")
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.prompts):
            raise PromptError(f"expected {len(self.prompts)} embeddings, got array of shape {emb.shape}")
        if not np.isfinite(emb).all():
            raise PromptError("prompt embeddings must be finite")
        object.__setattr__(self, "embeddings", emb)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def with_mode(self, mode: str) -> PromptSet:
        return PromptSet(self.prompts, self.embeddings, mode)


# -- toy text encoder ----------------------------------------------------------


def tokenize_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def hash_token(token: str, hash_size: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % hash_size


def init_text_encoder(store: ParamStore, config: TextConfig, rng: np.random.Generator) -> None:
    e = config.embed_dim
    store.add("text.table", rng.normal(0.0, 1.0, size=(config.hash_size, e)))
    store.add("text.W", rng.normal(0.0, math.sqrt(1.0 / e), size=(e, e)))
    store.add("text.b", np.zeros((1, e)))


def embed_texts(texts: Sequence[str], store: ParamStore, config: TextConfig) -> Tensor:
    """Taped (P, E) embeddings for a list of strings."""
    indices, lengths = [], []
    for text in texts:
        tokens = tokenize_text(text)
        if not tokens:
            raise PromptError(f"prompt {text!r} contains no alphanumeric tokens")
        indices.extend(hash_token(t, config.hash_size) for t in tokens)
        lengths.append(len(tokens))
    pooled = ad.segment_mean(ad.gather_rows(store["text.table"], indices), lengths)
    return ad.affine(pooled, store["text.W"], store["text.b"])


def embed_prompts_builtin(
    prompts: Sequence[str], store: ParamStore, config: TextConfig, mode: str = "abnormal"
) -> PromptSet:
    with ad.no_grad():
        emb = embed_texts(list(prompts), store, config).data.copy()
    return PromptSet(tuple(prompts), emb, mode)


# -- embedding files -------------------------------------------------------------


def load_prompt_embeddings(path: str | Path) -> PromptSet:
    """Read ``{"mode", "dim", "prompts": [{"text", "embedding"}]}``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        mode = doc.get("mode", "abnormal")
        entries = doc["prompts"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise PromptError(f"{path}: not a prompt embedding file ({exc})") from exc
    if not entries:
        raise PromptError(f"{path}: prompt list is empty")
    dims = {len(e["embedding"]) for e in entries}
    if len(dims) != 1:
        raise PromptError(f"{path}: inconsistent embedding dimensions {sorted(dims)}")
    dim = dims.pop()
    if "dim" in doc and doc["dim"] != dim:
        raise PromptError(f"{path}: header dim {doc['dim']} but embeddings have dim {dim}")
    return PromptSet(
        tuple(str(e["text"]) for e in entries),
        np.array([e["embedding"] for e in entries], dtype=np.float64),
        mode,
    )


def save_prompt_embeddings(prompts: PromptSet, path: str | Path) -> None:
    doc = {
        "mode": prompts.mode,
        "dim": prompts.dim,
        "prompts": [
            {"text": t, "embedding": row.tolist()} for t, row in zip(prompts.prompts, prompts.embeddings)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


# -- projection head -----------------------------------------------------------


def init_projection(store: ParamStore, feature_dim: int, config: TextConfig, rng: np.random.Generator) -> None:
    h, e = config.proj_hidden, config.embed_dim
    store.add("proj.W1", rng.normal(0.0, math.sqrt(2.0 / feature_dim), size=(h, feature_dim)))
    store.add("proj.b1", np.zeros((1, h)))
    store.add("proj.W2", rng.normal(0.0, math.sqrt(1.0 / h), size=(e, h)))
    store.add("proj.b2", np.zeros((1, e)))


def project_rows(features: Tensor, store: ParamStore) -> Tensor:
    """Two-layer MLP mapping (B, S) skeleton features to (B, E)."""
    if features.cols != store["proj.W1"].cols:
        raise ShapeError(f"feature dim {features.cols} does not match projection input {store['proj.W1'].cols}")
    h = ad.relu(ad.affine(features, store["proj.W1"], store["proj.b1"]))
    return ad.affine(h, store["proj.W2"], store["proj.b2"])


def project_feature(x, store: ParamStore) -> np.ndarray:
    """Project one feature vector (or a (B, S) matrix) into the text space."""
    arr = np.asarray(getattr(x, "x", x), dtype=np.float64)
    single = arr.ndim == 1
    with ad.no_grad():
        out = project_rows(ad.constant(arr.reshape(1, -1) if single else arr), store).data
    return out[0].copy() if single else out.copy()


class ProjectionHead:
    """Frozen view of the projection MLP inside a parameter store."""

    def __init__(self, store: ParamStore) -> None:
        self.store = store

    @property
    def input_dim(self) -> int:
        return self.store["proj.W1"].cols

    @property
    def output_dim(self) -> int:
        return self.store["proj.W2"].rows

    def __call__(self, x) -> np.ndarray:
        return project_feature(x, self.store)
