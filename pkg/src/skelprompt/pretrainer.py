"""Multi-task pretraining of the extractor, heads and toy text encoder.

The objective over a batch of N labeled clips is::

    L = alpha * sum_i CE(classifier(x_i), c_i) + (1 - alpha) * L_cont

where ``L_cont`` is the symmetric (skeleton-to-text and text-to-skeleton)
contrastive loss between projected features f(x_i) and the embedding of each
clip's class name, with a learnable temperature stored as log(tau).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from skelprompt import autodiff as ad
from skelprompt.autodiff import ParamStore, Tensor
from skelprompt.errors import CheckpointError, CheckpointVersionError, NonFiniteError, ShapeError, TrainingDivergedError
from skelprompt.extractor import ExtractorConfig, check_params, encode_batch, encode_features, init_extractor
from skelprompt.skeleton_data import RawClip, TokenCloud, tokenize_clip
from skelprompt.text_alignment import (
    ProjectionHead,
    PromptSet,
    TextConfig,
    embed_prompts_builtin,
    embed_texts,
    init_projection,
    init_text_encoder,
    project_feature,
    project_rows,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_TAU = "contrastive.log_tau"


@dataclass(frozen=True)
class PretrainConfig:
    alpha: float = 0.5
    init_tau: float = 0.1
    tau_min: float = 0.01
    tau_max: float = 100.0
    batch_size: int = 16
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0
    num_classes: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.tau_min <= self.init_tau <= self.tau_max:
            raise ValueError("need 0 < tau_min <= init_tau <= tau_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class Checkpoint:
    """Everything carried from pretraining into the target domain."""

    extractor: ExtractorConfig
    text: TextConfig
    class_names: tuple[str, ...]
    store: ParamStore
    metadata: dict = field(default_factory=dict)

    @property
    def tau(self) -> float:
        return math.exp(self.store[LOG_TAU].item())

    @property
    def feature_dim(self) -> int:
        return self.extractor.feature_dim

    def features(self, clouds: Sequence[TokenCloud]) -> np.ndarray:
        return encode_features(clouds, self.store, self.extractor)

    @property
    def head(self) -> ProjectionHead:
        return ProjectionHead(self.store)

    def project(self, features: np.ndarray) -> np.ndarray:
        return project_feature(features, self.store)

    def logits(self, features: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return classifier_logits(ad.constant(features), self.store).data.copy()

    def predict(self, clouds: Sequence[TokenCloud]) -> list[str]:
        idx = self.logits(self.features(clouds)).argmax(axis=1)
        return [self.class_names[i] for i in idx]

    def embed_prompts(self, prompts: Sequence[str], mode: str = "abnormal") -> PromptSet:
        return embed_prompts_builtin(prompts, self.store, self.text, mode)


def init_checkpoint(
    class_names: Sequence[str],
    extractor: ExtractorConfig | None = None,
    text: TextConfig | None = None,
    seed: int = 0,
    init_tau: float = 0.1,
) -> Checkpoint:
    extractor = extractor or ExtractorConfig()
    text = text or TextConfig()
    if len(class_names) < 2:
        raise ValueError("pretraining needs at least 2 classes")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_extractor(store, extractor, rng)
    init_projection(store, extractor.feature_dim, text, rng)
    init_text_encoder(store, text, rng)
    c = len(class_names)
    store.add("cls.W", rng.normal(0.0, math.sqrt(1.0 / extractor.feature_dim), size=(c, extractor.feature_dim)))
    store.add("cls.b", np.zeros((1, c)))
    store.add(LOG_TAU, np.array([[math.log(init_tau)]]))
    return Checkpoint(extractor, text, tuple(class_names), store, {"seed": seed, "epochs": 0})


# -- losses --------------------------------------------------------------------


def classifier_logits(features: Tensor, store: ParamStore) -> Tensor:
    return ad.affine(features, store["cls.W"], store["cls.b"])


def classification_loss(features: Tensor, store: ParamStore, targets: int | Sequence[int]) -> Tensor:
    """Summed cross-entropy of classifier logits against class indices."""
    if isinstance(targets, (int, np.integer)):
        return ad.softmax_cross_entropy(classifier_logits(features, store), int(targets))
    return ad.cross_entropy_rows(classifier_logits(features, store), targets)


def contrastive_loss(skeleton: Tensor, text: Tensor, tau: float | Tensor) -> Tensor:
    """Symmetric contrastive loss; row i of ``skeleton`` pairs with row i of ``text``.

    Every other row in the batch is a negative, including rows that share the
    same class name.
    """
    if skeleton.shape != text.shape:
        raise ShapeError(f"contrastive_loss: skeleton {skeleton.shape} vs text {text.shape}")
    if not isinstance(tau, Tensor):
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        tau = ad.constant([[float(tau)]])
    logits = ad.mul(ad.cosine_matrix(skeleton, text), ad.reciprocal(tau))
    positives = np.arange(skeleton.rows)
    s2t = ad.cross_entropy_rows(logits, positives)
    t2s = ad.cross_entropy_rows(ad.transpose(logits), positives)
    return ad.scale(ad.add(s2t, t2s), 0.5)


@dataclass
class LossParts:
    total: Tensor
    classification: float
    contrastive: float


def total_loss(
    ckpt: Checkpoint, clouds: Sequence[TokenCloud], targets: Sequence[int], alpha: float
) -> LossParts:
    store = ckpt.store
    features = encode_batch(clouds, store, ckpt.extractor)
    l_cls = classification_loss(features, store, list(targets))
    names = [ckpt.class_names[t] for t in targets]
    l_cont = contrastive_loss(
        project_rows(features, store), embed_texts(names, store, ckpt.text), ad.exp(store[LOG_TAU])
    )
    total = ad.add(ad.scale(l_cls, alpha), ad.scale(l_cont, 1.0 - alpha))
    return LossParts(total, l_cls.item(), l_cont.item())


# -- training loop -------------------------------------------------------------


def _labeled_clouds(data: Sequence[RawClip | TokenCloud]) -> list[TokenCloud]:
    clouds = [tokenize_clip(d) if isinstance(d, RawClip) else d for d in data]
    for c in clouds:
        if c.label is None:
            raise ValueError(f"clip {c.source!r} has no label")
    return clouds


def train(
    data: Sequence[RawClip | TokenCloud],
    config: PretrainConfig = PretrainConfig(),
    extractor: ExtractorConfig | None = None,
    text: TextConfig | None = None,
) -> Checkpoint:
    """Pretrain all networks on labeled clips; deterministic given ``config.seed``."""
    clouds = _labeled_clouds(data)
    class_names = sorted({c.label for c in clouds})
    if config.num_classes is not None and len(class_names) < config.num_classes:
        raise ValueError(f"dataset has {len(class_names)} distinct labels, expected {config.num_classes}")
    ckpt = init_checkpoint(class_names, extractor, text, config.seed, config.init_tau)
    index = {name: i for i, name in enumerate(class_names)}
    targets = np.array([index[c.label] for c in clouds])
    store = ckpt.store
    lo, hi = math.log(config.tau_min), math.log(config.tau_max)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(clouds))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            store.zero_grad()
            try:
                parts = total_loss(ckpt, [clouds[i] for i in batch], targets[batch], config.alpha)
                ad.backpropagate(parts.total)
            except NonFiniteError as exc:
                raise TrainingDivergedError(step) from exc
            ad.adam_step(store, config.lr)
            np.clip(store[LOG_TAU].data, lo, hi, out=store[LOG_TAU].data)
            step += 1
            sums += (parts.total.item(), parts.classification, parts.contrastive)
        n_batches = math.ceil(len(order) / config.batch_size)
        mean = (sums / n_batches).tolist()
        history.append(mean)
        logger.info("epoch %d: loss=%.4f cls=%.4f cont=%.4f tau=%.4f", epoch, *mean, ckpt.tau)
    ckpt.metadata = {
        "seed": config.seed,
        "epochs": config.epochs,
        "steps": step,
        "alpha": config.alpha,
        "lr": config.lr,
        "batch_size": config.batch_size,
        "final_loss": history[-1][0] if history else None,
        "final_classification_loss": history[-1][1] if history else None,
        "final_contrastive_loss": history[-1][2] if history else None,
        "history": history,
    }
    return ckpt


# -- persistence ---------------------------------------------------------------


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "extractor": ckpt.extractor.to_dict(),
        "text": ckpt.text.to_dict(),
        "class_names": list(ckpt.class_names),
        "shapes": {name: list(p.shape) for name, p in ckpt.store.items()},
        "params": {name: p.data.ravel().tolist() for name, p in ckpt.store.items()},
        "metadata": ckpt.metadata,
    }


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version!r}, this build reads {FORMAT_VERSION}")
    try:
        extractor = ExtractorConfig.from_dict(doc["extractor"])
        text = TextConfig.from_dict(doc["text"])
        store = ParamStore()
        for name, shape in doc["shapes"].items():
            values = np.array(doc["params"][name], dtype=np.float64)
            if values.size != shape[0] * shape[1]:
                raise CheckpointError(f"parameter {name!r}: {values.size} values for shape {shape}")
            store.add(name, values.reshape(shape))
        ckpt = Checkpoint(extractor, text, tuple(doc["class_names"]), store, doc.get("metadata", {}))
        check_params(store, extractor)
        for name in ("proj.W1", "proj.W2", "text.table", "text.W", "cls.W", LOG_TAU):
            if name not in store:
                raise CheckpointError(f"missing parameter {name!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(ckpt), fh)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    return checkpoint_from_dict(doc)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
