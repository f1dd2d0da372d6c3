"""Detection metrics, perturbation sweeps, encoder/AU-subset ablations and reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .config import ConfigError, ModelConfig
from .fusion import FusedModel, finetune, from_pretext, predict
from .pretext import PretextModel, reconstruct, task_target, train_pretext
from .video import LabeledClip, PerturbationSpec, perturb_clip


class UndefinedMetricError(ValueError):
    pass


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    return s, y


def _both_classes(y: np.ndarray, metric: str) -> tuple[int, int]:
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError(f"{metric} needs both real and fake samples")
    return n0, n1


def roc_auc(scores, labels) -> float:
    """P(fake score > real score) + 0.5 P(tie), from the Mann-Whitney rank sum."""
    s, y = _prep(scores, labels)
    n0, n1 = _both_classes(y, "AUC")
    twice_ranks = 2.0 * rankdata(s)  # integer-valued even with tied (half) ranks
    twice_u = twice_ranks[y == 1].sum() - n1 * (n1 + 1)
    return float(twice_u / (2.0 * n1 * n0))


def ranking(scores) -> np.ndarray:
    """Descending by score, ties broken by original index."""
    s = np.asarray(scores, dtype=float).ravel()
    return np.lexsort((np.arange(s.size), -s))


def average_precision(scores, labels) -> float:
    s, y = _prep(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        raise UndefinedMetricError("AP needs at least one fake sample")
    hits = y[ranking(s)]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits == 1].sum() / npos)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def recall_f1_at_threshold(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(recall of the fake class, mean of per-class F1) with fake predicted at score >= threshold."""
    s, y = _prep(scores, labels)
    _both_classes(y, "AR/mF1")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    ar = tp / (tp + fn)
    return float(ar), 0.5 * (_f1(tp, fp, fn) + _f1(tn, fn, fp))


RECALL_THRESHOLDS = np.round(np.arange(0.05, 1.0, 0.05), 2)


def threshold_free_recall(scores, labels, thresholds=RECALL_THRESHOLDS) -> float:
    """Fake-class recall averaged over a fixed grid of thresholds."""
    return float(np.mean([recall_f1_at_threshold(scores, labels, t)[0] for t in thresholds]))


@dataclass
class MetricReport:
    condition: str
    auc: float
    ap: float
    ar: float
    mf1: float
    n_real: int
    n_fake: int
    threshold: float = 0.5
    seed: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def metric_report(scores, labels, condition: str, threshold: float = 0.5, seed: int = 0,
                  config_hash: str = "") -> MetricReport:
    s, y = _prep(scores, labels)
    ar, mf1 = recall_f1_at_threshold(s, y, threshold)
    return MetricReport(condition, roc_auc(s, y), average_precision(s, y), ar, mf1,
                        int((y == 0).sum()), int(y.sum()), threshold, seed, config_hash)


def reports_json(reports: Iterable[MetricReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def format_table(rows: Sequence[MetricReport], title: str = "", columns=("auc", "ap", "ar", "mf1")) -> str:
    """Aligned plain-text table, one row per condition, metrics in percent."""
    head = ["Condition"] + [c.upper() for c in columns]
    body = [[r.condition] + [f"{100 * getattr(r, c):.1f}" for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: " | ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
    rule = "-+-".join("-" * w for w in widths)
    lines = ([title] if title else []) + [fmt(head), rule] + [fmt(r) for r in body]
    return "\n".join(lines)


# -- reconstruction error -------------------------------------------------------


def hierarchical_mae(videos: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean |pred - target| per frame, then per video, then over videos."""
    per_video = []
    for pred, target in videos:
        pred, target = np.asarray(pred, float), np.asarray(target, float)
        if pred.shape != target.shape:
            raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
        frame_mae = np.abs(pred - target).reshape(pred.shape[0], -1).mean(axis=1)
        per_video.append(frame_mae.mean())
    if not per_video:
        raise ConfigError("MAE needs at least one video")
    return float(np.mean(per_video))


def pretext_mae(model: PretextModel, corpus: Sequence[LabeledClip], seed: int = 0) -> float:
    if not corpus:
        raise ConfigError("MAE needs at least one video")

    def pairs():
        for i, clip in enumerate(corpus):
            target = task_target(clip, model.task, model.cfg)
            pred, _ = reconstruct(model, clip.stack.frames, target, seed + i)
            yield pred, target

    return hierarchical_mae(pairs())


# -- robustness and ablations ---------------------------------------------------


def robustness_sweep(
    model: FusedModel,
    corpus: Sequence[LabeledClip],
    grid: Sequence[PerturbationSpec],
    perturb_real: bool = True,
    threshold: float = 0.5,
) -> list[MetricReport]:
    """One report per perturbation plus the unperturbed reference, first."""
    labels = [c.label for c in corpus]
    h = model.cfg.digest()
    reports = [metric_report(predict(model, corpus), labels, "No Perturbation", threshold, 0, h)]
    for spec in grid:
        clips = []
        for i, clip in enumerate(corpus):
            if clip.label == 0 and not perturb_real:
                clips.append(clip)
                continue
            clip_spec = PerturbationSpec(spec.family, spec.parameter, spec.seed * 1_000_003 + i)
            clips.append(perturb_clip(clip, clip_spec))
        reports.append(metric_report(predict(model, clips), labels, spec.label, threshold, spec.seed, h))
    return reports


def ablation_run(
    modes: Sequence[str],
    train: Sequence[LabeledClip],
    test: Sequence[LabeledClip],
    cfg: ModelConfig,
    vfe_ckpt: PretextModel | None = None,
    aue_ckpt: PretextModel | None = None,
    label: Callable[[str], str] = lambda m: m,
) -> dict[str, MetricReport]:
    """Fine-tune and score each encoder mode on identical data and seeds."""
    out = {}
    labels = [c.label for c in test]
    for mode in modes:
        if mode in ("fused", "vfe_only") and vfe_ckpt is None:
            raise ConfigError(f"mode {mode!r} needs a frame_recon checkpoint")
        if mode in ("fused", "aue_only") and aue_ckpt is None:
            raise ConfigError(f"mode {mode!r} needs an au_detect checkpoint")
        model = from_pretext(cfg, vfe_ckpt, aue_ckpt, mode)
        finetune(train, model, cfg)
        out[mode] = metric_report(predict(model, test), labels, label(mode), seed=cfg.seed,
                                  config_hash=cfg.digest())
    return out


def au_subset_ablation(
    subsets: Sequence[str],
    pretrain_corpus: Sequence[LabeledClip],
    train: Sequence[LabeledClip],
    test: Sequence[LabeledClip],
    cfg: ModelConfig,
    vfe_ckpt: PretextModel,
    aue_steps: int | None = None,
) -> dict[str, MetricReport]:
    """Pretrain the AU encoder on each subset's targets, then fine-tune the fused model."""
    out = {}
    for subset in subsets:
        sub_cfg = cfg.replace(au_subset=subset)
        aue, _ = train_pretext(pretrain_corpus, sub_cfg, "au_detect", max_steps=aue_steps)
        rep = ablation_run(["fused"], train, test, sub_cfg, vfe_ckpt, aue, label=lambda m: f"AU subset {subset}")
        out[subset] = rep["fused"]
    return out
