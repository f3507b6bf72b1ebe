"""Command-line entry point: ``skelprompt <subcommand> [flags]``.

Subcommands follow the pipeline order::

    gen-toy -> pretrain -> embed -> fit -> score -> eval
                                   corrupt (any clip file)

Every command is deterministic given ``--seed`` and its inputs. ``fit`` and
``score`` only read the checkpoint; they never write one.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence

from skelprompt import __version__
from skelprompt.anomaly import DEFAULT_EPSILON, GaussianModel, ScoreConfig, auto_w1, fit_normal, read_report, write_report
from skelprompt.corruption import CorruptionSpec, corrupt_clip_logged, write_selection_log
from skelprompt.errors import SkelPromptError
from skelprompt.evaluation import (
    clip_features,
    domain_shift_eval,
    dump_features,
    metric_summary,
    robustness_curve,
    score_clips,
    truth_of,
    write_metrics,
)
from skelprompt.extractor import ExtractorConfig
from skelprompt.pretrainer import PretrainConfig, load_checkpoint, save_checkpoint, train
from skelprompt.skeleton_data import parse_clip_file, write_clip_file
from skelprompt.text_alignment import load_prompt_embeddings, save_prompt_embeddings
from skelprompt.toy import TOY_CLASSES, generate_toy_clips

logger = logging.getLogger("skelprompt")

DEFAULT_W1 = 0.3


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _name_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _w1(text: str) -> float | None:
    if text == "auto":
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--w1 takes a positive number or 'auto', got {text!r}") from exc
    if value <= 0:
        raise argparse.ArgumentTypeError("--w1 must be > 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelprompt", description="Zero-shot skeleton anomaly action recognition.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-toy", help="write a synthetic labeled clip file")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=60, help="clips per class (default 60)")
    g.add_argument("--classes", type=_name_list, default=TOY_CLASSES, help="comma-separated subset of the toy classes")
    g.add_argument("--frames", type=int, default=16, help="frames per clip (default 16)")
    g.add_argument("--prefix", default="toy", help="video id prefix")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("pretrain", help="pretrain the extractor, heads and toy text encoder")
    t.add_argument("--clips", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--alpha", type=float, default=0.5, help="classification weight in the loss (default 0.5)")
    t.add_argument("--init-tau", type=float, default=0.1)
    t.add_argument("--stem-width", type=int, default=64)
    t.add_argument("--widths", type=_int_list, default=(64, 128, 256), help="residual block widths")
    t.add_argument("--bottleneck", type=float, default=0.25, help="bottleneck ratio of each block")
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("embed", help="embed prompt strings with the checkpoint's text encoder")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--text", action="append", required=True, help="a prompt; repeat for several")
    e.add_argument("--mode", choices=("abnormal", "normal"), default="abnormal")
    e.add_argument("--out", required=True)

    f = sub.add_parser("fit", help="fit the normal-feature Gaussian (weights stay frozen)")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--clips", required=True, help="normal clips of the target domain")
    f.add_argument("--out", required=True, help="Gaussian model JSON")
    f.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    f.add_argument("--w2", type=float, default=2.0, help="temperature used to suggest w1")
    f.add_argument("--seed", type=int, default=0, help="fold assignment for the w1 suggestion")

    s = sub.add_parser("score", help="score clips with OoD, prompt and joint scores")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--gaussian", required=True)
    s.add_argument("--clips", required=True)
    s.add_argument("--prompts", help="prompt embedding JSON; without it the prompt score is 1")
    s.add_argument("--mode", choices=("abnormal", "normal"), help="override the prompt file's mode")
    _score_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--features-out", help="also dump raw features as CSV")

    v = sub.add_parser("eval", help="metrics from a score report, or a robustness / domain-shift protocol")
    v.add_argument("--protocol", choices=("report", "robustness", "domain-shift"), default="report")
    v.add_argument("--report", help="score report (protocol 'report')")
    v.add_argument("--clips", required=True, help="labeled clips being evaluated")
    v.add_argument("--abnormal", type=_name_list, required=True, help="comma-separated abnormal labels")
    v.add_argument("--checkpoint")
    v.add_argument("--gaussian")
    v.add_argument("--fit-clips", help="normal clips to refit on (robustness) or to split (domain-shift)")
    v.add_argument("--prompts")
    v.add_argument("--mode", choices=("abnormal", "normal"))
    _score_flags(v)
    v.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    v.add_argument("--ratios", type=_float_list, default=(0.0, 0.1, 0.2, 0.3, 0.4))
    v.add_argument("--subsets", type=int, default=5)
    v.add_argument("--metric", choices=("roc_auc", "accuracy", "best_accuracy"))
    v.add_argument("--kind", choices=("ood", "prompt", "joint"), default="joint")
    v.add_argument("--threshold", type=float, default=0.5)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.add_argument("--format", choices=("csv", "json"), default="json")

    c = sub.add_parser("corrupt", help="inject FP/FN joint errors and tracking swaps")
    c.add_argument("--clips", required=True)
    c.add_argument("--ratio", type=float, required=True)
    c.add_argument("--fp-sigma", type=float, help="jitter std in pixels (default 5%% of the frame diagonal)")
    c.add_argument("--swap-period", type=int, default=60, help="frames between tracking swaps; 0 disables")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--log", help="selection log JSON")
    return p


def _score_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--w1", type=_w1, default=None, help="OoD normalizing constant or 'auto' (default auto)")
    p.add_argument("--w2", type=float, default=2.0)
    p.add_argument("--prompt-w1", type=float, help="prompt-score w1 (default: same as --w1)")
    p.add_argument("--prompt-w2", type=float, help="prompt-score w2 (default: same as --w2)")


# -- commands ----------------------------------------------------------------------


def _cmd_gen_toy(a) -> None:
    write_clip_file(generate_toy_clips(a.per_class, a.seed, a.classes, a.frames, a.prefix), a.out)


def _cmd_pretrain(a) -> None:
    clips = parse_clip_file(a.clips)
    extractor = ExtractorConfig(stem_width=a.stem_width, block_widths=a.widths, bottleneck_ratio=a.bottleneck)
    config = PretrainConfig(
        alpha=a.alpha, init_tau=a.init_tau, batch_size=a.batch_size, epochs=a.epochs, lr=a.lr, seed=a.seed
    )
    save_checkpoint(train(clips, config, extractor), a.out)


def _cmd_embed(a) -> None:
    save_prompt_embeddings(load_checkpoint(a.checkpoint).embed_prompts(a.text, a.mode), a.out)


def _cmd_fit(a) -> None:
    ckpt = load_checkpoint(a.checkpoint)
    X = clip_features(ckpt, parse_clip_file(a.clips))
    model = fit_normal(X, a.epsilon)
    model.save(a.out, suggested_w1=auto_w1(X, a.w2, a.epsilon, DEFAULT_W1, a.seed), w2=a.w2, n_samples=int(X.shape[0]))


def _load_gaussian(path: str) -> tuple[GaussianModel, float | None]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return GaussianModel.from_dict(doc), doc.get("suggested_w1")


def _score_config(a, suggested: float | None) -> ScoreConfig:
    w1 = a.w1 if a.w1 is not None else (suggested if suggested is not None else DEFAULT_W1)
    return ScoreConfig(w1=w1, w2=a.w2, prompt_w1=a.prompt_w1, prompt_w2=a.prompt_w2)


def _load_prompts(a):
    if not a.prompts:
        return None
    prompts = load_prompt_embeddings(a.prompts)
    return prompts.with_mode(a.mode) if a.mode else prompts


def _cmd_score(a) -> None:
    ckpt = load_checkpoint(a.checkpoint)
    model, suggested = _load_gaussian(a.gaussian)
    clips = parse_clip_file(a.clips)
    rows = score_clips(ckpt, model, _load_prompts(a), clips, _score_config(a, suggested))
    write_report(rows, a.out, a.format)
    if a.features_out:
        dump_features(ckpt, clips, a.features_out)


def _require(a, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(a, n) is None]
    if missing:
        raise _UsageError(f"eval --protocol {a.protocol} requires {', '.join(missing)}")


class _UsageError(Exception):
    pass


def _cmd_eval(a) -> None:
    clips = parse_clip_file(a.clips)
    if a.protocol == "report":
        _require(a, "report")
        rows = {r.video_id: r for r in read_report(a.report)}
        missing = [c.video_id for c in clips if c.video_id not in rows]
        if missing:
            raise SkelPromptError(f"report has no scores for {len(missing)} clip(s), e.g. {missing[0]!r}")
        ordered = [rows[c.video_id] for c in clips]
        write_metrics(metric_summary(ordered, [truth_of(c, a.abnormal) for c in clips]), a.out, a.format)
        return
    _require(a, "checkpoint")
    ckpt = load_checkpoint(a.checkpoint)
    prompts = _load_prompts(a)
    if a.protocol == "robustness":
        _require(a, "gaussian")
        model, suggested = _load_gaussian(a.gaussian)
        refit = parse_clip_file(a.fit_clips) if a.fit_clips else None
        points = robustness_curve(
            ckpt, model, prompts, clips, a.ratios,
            abnormal=a.abnormal, cfg=_score_config(a, suggested), metric=a.metric or "roc_auc", kind=a.kind,
            threshold=a.threshold, seed=a.seed, refit_clips=refit, recalibrate=a.w1 is None,
            epsilon=a.epsilon, out=a.out if a.format == "csv" else None,
        )
        if a.format == "json":
            with open(a.out, "w", encoding="utf-8") as fh:
                json.dump([{"ratio": p.ratio, "metric": p.metric} for p in points], fh, indent=1)
        return
    _require(a, "fit_clips")
    cfg = None if a.w1 is None else _score_config(a, None)
    mean, var, results = domain_shift_eval(
        ckpt, parse_clip_file(a.fit_clips), clips, a.subsets,
        abnormal=a.abnormal, prompts=prompts, cfg=cfg, epsilon=a.epsilon, metric=a.metric or "accuracy",
        kind=a.kind, threshold=a.threshold, seed=a.seed, out=a.out if a.format == "csv" else None,
    )
    if a.format == "json":
        with open(a.out, "w", encoding="utf-8") as fh:
            json.dump({"mean": mean, "variance": var, "subsets": [r.__dict__ for r in results]}, fh, indent=1)


def _cmd_corrupt(a) -> None:
    spec = CorruptionSpec(
        error_ratio=a.ratio, fp_sigma=a.fp_sigma, track_swap_period=a.swap_period or None, seed=a.seed
    )
    out, logs = [], []
    for clip in parse_clip_file(a.clips):
        corrupted, log = corrupt_clip_logged(clip, spec)
        out.append(corrupted)
        logs.append(log)
    write_clip_file(out, a.out)
    if a.log:
        write_selection_log(logs, a.log)


COMMANDS = {
    "gen-toy": _cmd_gen_toy,
    "pretrain": _cmd_pretrain,
    "embed": _cmd_embed,
    "fit": _cmd_fit,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "corrupt": _cmd_corrupt,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"skelprompt: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, SkelPromptError, ValueError, json.JSONDecodeError) as exc:
        print(f"skelprompt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
