"""Metrics and experiment protocols over scored clips."""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Collection, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from skelprompt.anomaly import (
    DEFAULT_EPSILON,
    GaussianModel,
    ReportRow,
    ScoreConfig,
    auto_w1,
    fit_normal,
    joint_anomaly_scores,
)
from skelprompt.corruption import CorruptionSpec, corrupt_clip
from skelprompt.skeleton_data import RawClip, split_subsets, tokenize_clip
from skelprompt.text_alignment import PromptSet

TRUTHS = ("normal", "abnormal")
SCORE_KINDS = ("ood", "prompt", "joint")


@dataclass(frozen=True)
class LabeledScore:
    video_id: str
    score: float
    truth: str

    def __post_init__(self) -> None:
        if self.truth not in TRUTHS:
            raise ValueError(f"truth must be one of {TRUTHS}, got {self.truth!r}")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score for {self.video_id!r} must be finite in [0, 1], got {self.score}")

    @property
    def is_abnormal(self) -> bool:
        return self.truth == "abnormal"


def _split(scores: Sequence[LabeledScore]) -> tuple[np.ndarray, np.ndarray]:
    s = np.array([x.score for x in scores], dtype=np.float64)
    y = np.array([x.is_abnormal for x in scores], dtype=bool)
    return s, y


def roc_auc(scores: Sequence[LabeledScore]) -> float:
    """P(random abnormal outscores random normal), ties counted as one half."""
    s, y = _split(scores)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"roc_auc needs both classes, got {n_pos} abnormal and {n_neg} normal")
    # Mann-Whitney U from mid-ranks: average ranks give ties exactly 1/2.
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_accuracy(scores: Sequence[LabeledScore], threshold: float = 0.5) -> float:
    if not scores:
        raise ValueError("binary_accuracy of an empty score list")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    s, y = _split(scores)
    return float(np.mean((s >= threshold) == y))


def best_accuracy(scores: Sequence[LabeledScore]) -> tuple[float, float]:
    """Highest accuracy over all distinct operating points, as (threshold, accuracy).

    Candidate thresholds are every observed score plus one point above the
    maximum (everything normal) when it still lies in [0, 1].
    """
    if not scores:
        raise ValueError("best_accuracy of an empty score list")
    s, _ = _split(scores)
    candidates = np.unique(s).tolist()
    above = float(np.nextafter(s.max(), np.inf))
    if above <= 1.0:
        candidates.append(above)
    best = (candidates[0], -1.0)
    for t in candidates:
        acc = binary_accuracy(scores, t)
        if acc > best[1]:
            best = (t, acc)
    return best


def labeled(rows: Sequence[ReportRow], truths: Sequence[str], kind: str = "joint") -> list[LabeledScore]:
    if kind not in SCORE_KINDS:
        raise ValueError(f"score kind must be one of {SCORE_KINDS}, got {kind!r}")
    if len(rows) != len(truths):
        raise ValueError(f"{len(rows)} score rows for {len(truths)} truth labels")
    return [LabeledScore(r.video_id, getattr(r, kind), t) for r, t in zip(rows, truths)]


def truth_of(clip: RawClip, abnormal: Collection[str]) -> str:
    if clip.label is None:
        raise ValueError(f"clip {clip.video_id!r} has no label")
    return "abnormal" if clip.label in abnormal else "normal"


def metric_summary(rows: Sequence[ReportRow], truths: Sequence[str]) -> dict:
    """ROC-AUC and accuracies (at 0.5 and at the best sweep threshold) per score kind."""
    out: dict = {"n": len(rows), "n_abnormal": sum(t == "abnormal" for t in truths)}
    for kind in SCORE_KINDS:
        scores = labeled(rows, truths, kind)
        threshold, acc = best_accuracy(scores)
        out[kind] = {
            "roc_auc": roc_auc(scores) if 0 < out["n_abnormal"] < len(rows) else None,
            "accuracy@0.5": binary_accuracy(scores, 0.5),
            "best_threshold": threshold,
            "best_accuracy": acc,
        }
    return out


def write_metrics(summary: dict, path: str | Path, fmt: str = "json") -> None:
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1)
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["score", "metric", "value"])
            for kind in SCORE_KINDS:
                for metric, value in summary[kind].items():
                    writer.writerow([kind, metric, "" if value is None else repr(value)])
    else:
        raise ValueError(f"unknown metric format {fmt!r}")


# -- scoring helpers -------------------------------------------------------------


def clip_features(ckpt, clips: Sequence[RawClip]) -> np.ndarray:
    return ckpt.features([tokenize_clip(c) for c in clips])


def score_clips(
    ckpt, model: GaussianModel, prompts: PromptSet | None, clips: Sequence[RawClip], cfg: ScoreConfig = ScoreConfig()
) -> list[ReportRow]:
    return joint_anomaly_scores(clip_features(ckpt, clips), model, prompts, ckpt.head, cfg, [c.video_id for c in clips])


def fit_clips(
    ckpt, clips: Sequence[RawClip], epsilon: float = DEFAULT_EPSILON, cfg: ScoreConfig | None = None
) -> tuple[GaussianModel, ScoreConfig]:
    """Fit the normal Gaussian on ``clips``; with ``cfg=None`` w1 is calibrated from the data."""
    X = clip_features(ckpt, clips)
    model = fit_normal(X, epsilon)
    if cfg is None:
        cfg = ScoreConfig(w1=auto_w1(X, 2.0, epsilon))
    return model, cfg


def _metric(rows: Sequence[ReportRow], truths: Sequence[str], metric: str, kind: str, threshold: float) -> float:
    scores = labeled(rows, truths, kind)
    if metric == "roc_auc":
        return roc_auc(scores)
    if metric == "accuracy":
        return binary_accuracy(scores, threshold)
    if metric == "best_accuracy":
        return best_accuracy(scores)[1]
    raise ValueError(f"unknown metric {metric!r}")


# -- protocols -------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    ratio: float
    metric: float


def robustness_curve(
    ckpt,
    model: GaussianModel,
    prompts: PromptSet | None,
    clips: Sequence[RawClip],
    ratios: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4),
    *,
    abnormal: Collection[str],
    cfg: ScoreConfig = ScoreConfig(),
    metric: str = "roc_auc",
    kind: str = "joint",
    threshold: float = 0.5,
    seed: int = 0,
    fp_sigma: float | None = None,
    track_swap_period: int | None = 60,
    refit_clips: Sequence[RawClip] | None = None,
    recalibrate: bool = False,
    epsilon: float | None = None,
    out: str | Path | None = None,
) -> list[CurvePoint]:
    """Metric of the scoring pipeline on clips corrupted at each ratio.

    With ``refit_clips`` the normal clips are corrupted too and the Gaussian is
    refitted on them at every ratio (and w1 recalibrated if ``recalibrate``),
    i.e. the whole target domain suffers the same detection errors. Ratio 0
    uses the clips unchanged and the given ``model``/``cfg``, so it reproduces
    the clean run exactly.
    """
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"corruption ratios must lie in [0, 1], got {r}")
    truths = [truth_of(c, abnormal) for c in clips]
    eps = model.epsilon if epsilon is None else epsilon
    points = []
    for r in ratios:
        if r == 0:
            m, c, test = model, cfg, list(clips)
        else:
            spec = CorruptionSpec(error_ratio=r, fp_sigma=fp_sigma, track_swap_period=track_swap_period, seed=seed)
            test = [corrupt_clip(clip, spec) for clip in clips]
            m, c = model, cfg
            if refit_clips is not None:
                m, fitted = fit_clips(ckpt, [corrupt_clip(clip, spec) for clip in refit_clips], eps, None)
                if recalibrate:
                    c = ScoreConfig(fitted.w1, cfg.w2, cfg.prompt_w1, cfg.prompt_w2)
        rows = score_clips(ckpt, m, prompts, test, c)
        points.append(CurvePoint(float(r), _metric(rows, truths, metric, kind, threshold)))
    if out is not None:
        write_curve(points, out, metric)
    return points


def write_curve(points: Sequence[CurvePoint], path: str | Path, metric: str = "metric") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", metric])
        for p in points:
            writer.writerow([repr(p.ratio), repr(p.metric)])


@dataclass(frozen=True)
class SubsetResult:
    subset: int
    n_fit: int
    metric: float


def domain_shift_eval(
    ckpt,
    normal_clips: Sequence[RawClip],
    test_clips: Sequence[RawClip],
    n_subsets: int = 5,
    *,
    abnormal: Collection[str],
    prompts: PromptSet | None = None,
    cfg: ScoreConfig | None = None,
    epsilon: float = DEFAULT_EPSILON,
    metric: str = "accuracy",
    kind: str = "joint",
    threshold: float = 0.5,
    seed: int = 0,
    out: str | Path | None = None,
) -> tuple[float, float, list[SubsetResult]]:
    """Mean and population variance of the metric over per-subset Gaussians.

    ``normal_clips`` is split into ``n_subsets`` disjoint scenes; a Gaussian is
    fitted on each and evaluated on the same held-out ``test_clips``.
    """
    if n_subsets < 2:
        raise ValueError(f"n_subsets must be >= 2, got {n_subsets}")
    subsets = split_subsets(list(normal_clips), n_subsets, seed)
    for i, s in enumerate(subsets):
        if len(s) < 2:
            raise ValueError(f"subset {i} has {len(s)} clip(s); at least 2 are needed to fit a Gaussian")
    truths = [truth_of(c, abnormal) for c in test_clips]
    X_test = clip_features(ckpt, test_clips)
    ids = [c.video_id for c in test_clips]
    results = []
    for i, subset in enumerate(subsets):
        model, c = fit_clips(ckpt, subset, epsilon, cfg)
        rows = joint_anomaly_scores(X_test, model, prompts, ckpt.head, c, ids)
        results.append(SubsetResult(i, len(subset), _metric(rows, truths, metric, kind, threshold)))
    values = np.array([r.metric for r in results])
    mean, var = float(values.mean()), float(values.var())
    if out is not None:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subset", "n_fit", metric])
            for r in results:
                writer.writerow([r.subset, r.n_fit, repr(r.metric)])
    return mean, var, results


# -- feature dumps ---------------------------------------------------------------


def dump_features(ckpt, clips: Sequence[RawClip], path: str | Path) -> np.ndarray:
    """Write ``video_id, f0..f{S-1}, label`` per clip; returns the feature matrix."""
    X = clip_features(ckpt, clips)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", *(f"f{i}" for i in range(X.shape[1])), "label"])
        for clip, row in zip(clips, X):
            writer.writerow([clip.video_id, *(repr(float(v)) for v in row), clip.label or ""])
    return X


def load_features(path: str | Path) -> tuple[list[str], np.ndarray, list[str | None]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows, labels = [], [], []
        for rec in reader:
            if len(rec) != len(header):
                raise ValueError(f"{path}: row for {rec[0]!r} has {len(rec)} fields, header has {len(header)}")
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:-1]])
            labels.append(rec[-1] or None)
    return ids, np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2), labels


def curve_to_dicts(points: Sequence[CurvePoint]) -> list[dict]:
    return [asdict(p) for p in points]
