"""Anomaly scores computed on frozen skeleton features.

Three scores per clip, each in [0, 1]:

* OoD score: ``min(1, w1 * d ** (1 / w2))`` with ``d`` the Mahalanobis
  distance to a Gaussian fitted on normal-sample features.
* Prompt score: ``min(1, w1 * max(0, raw) ** (1 / w2))`` where ``raw`` is the
  best cosine similarity between the projected feature and the prompt
  embeddings (abnormal prompts), or one minus it (normal prompts).
* Joint score: the product of the two.
"""

from __future__ import annotations

import csv
import json
import warnings
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from skelprompt.autodiff import DegenerateCosineWarning
from skelprompt.errors import FactorizationError, PromptError, ShapeError
from skelprompt.text_alignment import PromptSet

DEFAULT_EPSILON = 1e-3
REPORT_FIELDS = ("video_id", "ood", "prompt", "joint", "argmax_prompt")


@dataclass(frozen=True, eq=False)
class GaussianModel:
    mean: np.ndarray
    cov: np.ndarray
    epsilon: float
    factor: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov, epsilon: float = DEFAULT_EPSILON) -> GaussianModel:
        mean = np.asarray(mean, dtype=np.float64).ravel()
        cov = np.asarray(cov, dtype=np.float64)
        s = mean.size
        if cov.shape != (s, s):
            raise ShapeError(f"covariance shape {cov.shape} does not match mean dimension {s}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        if epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {epsilon}")
        try:
            factor = np.linalg.cholesky(cov + epsilon * np.eye(s))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                f"covariance + {epsilon:g}*I is not positive definite; increase epsilon"
            ) from exc
        return cls(mean, cov, float(epsilon), factor)

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {"dim": self.dim, "mu": self.mean.tolist(), "sigma": self.cov.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, doc: dict) -> GaussianModel:
        model = cls.from_moments(doc["mu"], doc["sigma"], doc["epsilon"])
        if model.dim != doc.get("dim", model.dim):
            raise ShapeError(f"gaussian file declares dim {doc['dim']}, mean has {model.dim}")
        return model

    def save(self, path: str | Path, **extra) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({**self.to_dict(), **extra}, fh)

    @classmethod
    def load(cls, path: str | Path) -> GaussianModel:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _as_matrix(features) -> np.ndarray:
    if hasattr(features, "x"):
        features = features.x
    elif isinstance(features, (list, tuple)) and features and hasattr(features[0], "x"):
        features = [f.x for f in features]
    arr = np.asarray(features, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def fit_normal(features, epsilon: float = DEFAULT_EPSILON) -> GaussianModel:
    """Fit mean and unbiased covariance to normal-sample features.

    Takes features, never clips or weights: the extractor stays untouched.
    """
    X = _as_matrix(features)
    if X.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors to fit a Gaussian, got {X.shape[0]}")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    return GaussianModel.from_moments(mean, (cov + cov.T) / 2, epsilon)


def mahalanobis(x, model: GaussianModel) -> np.ndarray | float:
    """Distance of each row of ``x`` under the regularized covariance."""
    X = _as_matrix(x)
    if X.shape[1] != model.dim:
        raise ShapeError(f"feature dim {X.shape[1]} does not match model dim {model.dim}")
    # Row by row so a clip's score does not depend on what it is batched with.
    d = np.empty(X.shape[0])
    for i, row in enumerate(X - model.mean):
        z = solve_triangular(model.factor, row, lower=True, check_finite=False)
        d[i] = np.sqrt(z @ z)
    return float(d[0]) if np.ndim(x) == 1 or hasattr(x, "x") else d


@dataclass(frozen=True)
class ScoreConfig:
    """Normalizing constant ``w1`` and temperature ``w2``.

    The prompt score reuses them unless ``prompt_w1`` / ``prompt_w2`` are set.
    """

    w1: float = 0.3
    w2: float = 2.0
    prompt_w1: float | None = None
    prompt_w2: float | None = None

    def __post_init__(self) -> None:
        for name in ("w1", "w2", "prompt_w1", "prompt_w2"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")

    @property
    def prompt_pair(self) -> tuple[float, float]:
        return (
            self.w1 if self.prompt_w1 is None else self.prompt_w1,
            self.w2 if self.prompt_w2 is None else self.prompt_w2,
        )


def calibrate(raw, w1: float, w2: float):
    """``min(1, w1 * max(0, raw) ** (1 / w2))``, elementwise."""
    return np.minimum(1.0, w1 * np.maximum(0.0, raw) ** (1.0 / w2))


def ood_score(x, model: GaussianModel, cfg: ScoreConfig = ScoreConfig()):
    return calibrate(mahalanobis(x, model), cfg.w1, cfg.w2)


def cross_validated_distances(features, epsilon: float = DEFAULT_EPSILON, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Distance of every sample from a Gaussian fitted without its fold.

    In-sample distances are biased low when samples are fewer than feature
    dimensions, because each sample lies in the span it was fitted on.
    """
    X = _as_matrix(features)
    folds = min(folds, X.shape[0])
    if folds < 2 or X.shape[0] - X.shape[0] // folds < 2:
        raise ValueError(f"need more samples for {folds}-fold distances, got {X.shape[0]}")
    order = np.random.default_rng(seed).permutation(X.shape[0])
    d = np.empty(X.shape[0])
    for held in np.array_split(order, folds):
        keep = np.setdiff1d(order, held)
        d[held] = mahalanobis(X[held], fit_normal(X[keep], epsilon))
    return d


def suggest_w1(distances, w2: float, quantile: float = 0.95, target: float = 0.5) -> float:
    """w1 mapping the given quantile of normal-sample distances to ``target``.

    Pass held-out distances (see :func:`cross_validated_distances`).
    """
    d = float(np.quantile(np.asarray(distances, dtype=np.float64), quantile))
    return target / d ** (1.0 / w2) if d > 0 else 1.0


def auto_w1(
    features, w2: float = 2.0, epsilon: float = DEFAULT_EPSILON, default: float = 0.3, seed: int = 0
) -> float:
    """:func:`suggest_w1` on cross-validated distances, or ``default`` with too few samples."""
    X = _as_matrix(features)
    if X.shape[0] < 4:
        return default
    return suggest_w1(cross_validated_distances(X, epsilon, folds=min(5, X.shape[0] // 2), seed=seed), w2)


def prompt_similarity(embedded, prompts: PromptSet) -> tuple[np.ndarray, np.ndarray]:
    """Best cosine similarity to any prompt, and its index, per row."""
    F = np.asarray(embedded, dtype=np.float64)
    F = F.reshape(1, -1) if F.ndim == 1 else F
    if F.shape[1] != prompts.dim:
        raise ShapeError(f"projected dim {F.shape[1]} does not match prompt dim {prompts.dim}")
    fn = np.linalg.norm(F, axis=1, keepdims=True)
    yn = np.linalg.norm(prompts.embeddings, axis=1, keepdims=True)
    if (fn == 0).any() or (yn == 0).any():
        warnings.warn("cosine similarity of a zero-length vector", DegenerateCosineWarning, stacklevel=2)
    F = np.divide(F, fn, out=np.zeros_like(F), where=fn > 0)
    Y = np.divide(prompts.embeddings, yn, out=np.zeros_like(prompts.embeddings), where=yn > 0)
    cos = np.vstack([Y @ row for row in F]) if len(F) else np.zeros((0, len(Y)))
    arg = cos.argmax(axis=1)
    return cos[np.arange(len(arg)), arg], arg


def prompt_raw_score(embedded, prompts: PromptSet) -> tuple[np.ndarray, np.ndarray]:
    best, arg = prompt_similarity(embedded, prompts)
    return (best if prompts.mode == "abnormal" else 1.0 - best), arg


def _project(x, head: Callable | None) -> np.ndarray:
    arr = _as_matrix(x)
    return arr if head is None else head(arr)


def prompt_action_score(x, prompts: PromptSet | None, head: Callable | None, cfg: ScoreConfig = ScoreConfig()):
    """Prompt-guided action score of feature(s) ``x``.

    ``head`` maps skeleton features into the prompt space; pass ``None`` when
    ``x`` is already projected.
    """
    if prompts is None:
        raise PromptError("prompt score needs a non-empty prompt set")
    raw, _ = prompt_raw_score(_project(x, head), prompts)
    score = calibrate(raw, *cfg.prompt_pair)
    return float(score[0]) if np.ndim(x) == 1 or hasattr(x, "x") else score


ood_only_score = ood_score
prompt_only_score = prompt_action_score


@dataclass(frozen=True)
class ReportRow:
    video_id: str
    ood: float
    prompt: float
    joint: float
    argmax_prompt: int


def joint_anomaly_scores(
    features,
    model: GaussianModel,
    prompts: PromptSet | None,
    head: Callable | None,
    cfg: ScoreConfig = ScoreConfig(),
    video_ids: Sequence[str] | None = None,
) -> list[ReportRow]:
    """OoD, prompt and joint scores for every row of ``features``.

    Without prompts the prompt factor is 1 and ``argmax_prompt`` is -1, so the
    joint score reduces to the OoD score.
    """
    X = _as_matrix(features)
    ood = np.atleast_1d(ood_score(X, model, cfg))
    if prompts is None:
        prompt = np.ones(len(X))
        arg = np.full(len(X), -1)
    else:
        raw, arg = prompt_raw_score(_project(X, head), prompts)
        prompt = calibrate(raw, *cfg.prompt_pair)
    ids = video_ids if video_ids is not None else [str(i) for i in range(len(X))]
    if len(ids) != len(X):
        raise ShapeError(f"{len(ids)} video ids for {len(X)} feature rows")
    return [
        ReportRow(str(v), float(o), float(p), float(o) * float(p), int(a))
        for v, o, p, a in zip(ids, ood, prompt, arg)
    ]


def joint_anomaly_score(
    x, model: GaussianModel, prompts: PromptSet | None, head: Callable | None,
    cfg: ScoreConfig = ScoreConfig(), video_id: str | None = None,
) -> ReportRow:
    """Report row for a single feature vector or :class:`SkeletonFeature`."""
    vid = video_id if video_id is not None else getattr(x, "source", "0")
    return joint_anomaly_scores(_as_matrix(x).reshape(1, -1), model, prompts, head, cfg, [vid])[0]


def write_report(rows: Sequence[ReportRow], path: str | Path, fmt: str = "csv") -> None:
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            for r in rows:
                writer.writerow({**asdict(r), **{k: repr(getattr(r, k)) for k in ("ood", "prompt", "joint")}})
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([asdict(r) for r in rows], fh, indent=1)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path: str | Path) -> list[ReportRow]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        records = json.loads(text)
    else:
        records = list(csv.DictReader(text.splitlines()))
    return [
        ReportRow(str(r["video_id"]), float(r["ood"]), float(r["prompt"]), float(r["joint"]), int(r["argmax_prompt"]))
        for r in records
    ]
