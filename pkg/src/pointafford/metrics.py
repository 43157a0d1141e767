"""Evaluation: average precision, ROC AUC, threshold-averaged IoU, summed MSE,
split-level evaluation with per-affordance pooling, and the prompt-ablation
harness.

Reported values are the unscaled metrics times 100; everything here stores
the unscaled value and leaves scaling to the report layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cloud import load_points
from .data import DatasetManifest, DatasetRecord, load_scores
from .instructions import AffordanceVocabulary, render_seed_qa, rule_paraphrase
from .model import AffordanceModel, group_cloud

PROMPT_VARIANTS = ("hi", "action", "object_action", "full_question", "augmented")
N_IOU_THRESHOLDS = 100


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. no positive labels)."""


def _check_binary_inputs(scores, gt) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt)
    if scores.shape != gt.shape or scores.ndim != 1:
        raise ValueError(f"scores/gt must be equal-length vectors, got {scores.shape}, {gt.shape}")
    return scores, gt.astype(bool)


def precision_recall_curve(scores, gt_binary) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at each distinct score threshold (descending).

    Tied scores form a single rank: precision/recall are evaluated at the end
    of every tie group.
    """
    scores, gt = _check_binary_inputs(scores, gt_binary)
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    s, g = scores[order], gt[order]
    last_of_group = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(g)[last_of_group]
    precision = tp / (last_of_group + 1.0)
    recall = tp / n_pos
    return precision, recall


def average_precision(scores, gt_binary) -> float:
    """Step-sum AP over the precision-recall curve: sum (R_n - R_{n-1}) P_n."""
    precision, recall = precision_recall_curve(scores, gt_binary)
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def roc_auc(scores, gt_binary) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores, gt = _check_binary_inputs(scores, gt_binary)
    n_pos = int(gt.sum())
    n_neg = gt.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    # midranks: tied values share the average of their 1-based rank range
    boundaries = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    starts = np.concatenate(([0], boundaries[:-1] + 1))
    midranks = np.empty(s.shape[0], dtype=np.float64)
    for lo, hi in zip(starts, boundaries):
        midranks[lo : hi + 1] = 0.5 * (lo + hi) + 1.0
    rank_sum_pos = midranks[gt[order]].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def aiou(scores, gt_binary) -> float:
    """IoU of (score > t) vs gt, averaged over t in {0.00, 0.01, ..., 0.99}.

    The comparator is strict, so t = 0 already excludes exact-zero scores.
    """
    scores, gt = _check_binary_inputs(scores, gt_binary)
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise UndefinedMetricError("aIoU needs at least one positive")
    thresholds = np.arange(N_IOU_THRESHOLDS) / 100.0
    sorted_all = np.sort(scores)
    sorted_pos = np.sort(scores[gt])
    n_pred = scores.shape[0] - np.searchsorted(sorted_all, thresholds, side="right")
    n_inter = n_pos - np.searchsorted(sorted_pos, thresholds, side="right")
    union = n_pos + n_pred - n_inter
    return float(np.mean(n_inter / union))


def mse_summed(per_class_pairs) -> float:
    """Sum over classes of the mean squared error between soft maps."""
    total = 0.0
    for pred, gt in per_class_pairs:
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise ValueError("per-class prediction/target lengths differ")
        total += float(np.mean((pred - gt) ** 2))
    return total


@dataclass
class ClassMetrics:
    ap: float | None
    auc: float | None
    aiou: float | None
    mse: float
    n_points: int
    n_positive: int


@dataclass
class MetricsReport:
    """Per-affordance and aggregate metrics for one evaluated split.

    Values are unscaled (in [0, 1] for AP/AUC/aIoU); the report writers scale
    by 100 before rounding. Classes whose metric is undefined on the split are
    listed in ``excluded`` and left out of the aggregate means.
    """

    per_class: dict[str, ClassMetrics]
    mean_ap: float | None
    mean_auc: float | None
    mean_aiou: float | None
    mse_sum: float
    excluded: dict[str, list[str]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def scaled(self) -> dict:
        """Reported aggregates, scaled by 100 (except nothing: MSE sums raw class means)."""
        out = {}
        for key, value in (
            ("mAP", self.mean_ap),
            ("AUC", self.mean_auc),
            ("aIoU", self.mean_aiou),
            ("MSE", self.mse_sum),
        ):
            out[key] = None if value is None else 100.0 * value
        return out


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def compute_report(
    pooled: dict[str, tuple[np.ndarray, np.ndarray]],
    gt_threshold: float = 0.5,
    metadata: dict | None = None,
) -> MetricsReport:
    """Metrics over per-affordance pooled (scores, soft ground truth) arrays."""
    if not pooled:
        raise ValueError("cannot evaluate an empty split")
    per_class: dict[str, ClassMetrics] = {}
    excluded: dict[str, list[str]] = {"AP": [], "AUC": [], "aIoU": []}
    curves = {}
    aps, aucs, aious = [], [], []
    mse_total = 0.0
    for name in sorted(pooled):
        scores, gt_soft = pooled[name]
        gt_bin = np.asarray(gt_soft) > gt_threshold
        mse = mse_summed([(scores, gt_soft)])
        mse_total += mse
        metric_values: dict[str, float | None] = {}
        for key, fn, bucket in (("AP", average_precision, aps), ("AUC", roc_auc, aucs), ("aIoU", aiou, aious)):
            try:
                value = fn(scores, gt_bin)
            except UndefinedMetricError:
                metric_values[key] = None
                excluded[key].append(name)
                continue
            metric_values[key] = value
            bucket.append(value)
        if metric_values["AP"] is not None:
            precision, recall = precision_recall_curve(scores, gt_bin)
            curves[name] = (recall, precision)
        per_class[name] = ClassMetrics(
            ap=metric_values["AP"],
            auc=metric_values["AUC"],
            aiou=metric_values["aIoU"],
            mse=mse,
            n_points=int(np.asarray(scores).shape[0]),
            n_positive=int(gt_bin.sum()),
        )
    return MetricsReport(
        per_class=per_class,
        mean_ap=_mean_or_none(aps),
        mean_auc=_mean_or_none(aucs),
        mean_aiou=_mean_or_none(aious),
        mse_sum=mse_total,
        excluded={k: v for k, v in excluded.items() if v},
        metadata=metadata or {},
        curves=curves,
    )


# ---------------------------------------------------------------------------
# running a model over records


def predict_records(
    model: AffordanceModel,
    records: list[DatasetRecord],
    root: str | Path,
    batch_size: int = 16,
    instruct_override: dict[int, str] | None = None,
) -> list[np.ndarray]:
    """Eval-mode per-point scores for every record, in record order."""
    root = Path(root)
    model.eval()
    config = model.encoder.config
    cloud_cache: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}

    def cloud_arrays(rel: str):
        if rel not in cloud_cache:
            from .cloud import PointCloud

            pts = load_points(root / rel).astype(np.float32)
            members, centers, neighbors = group_cloud(PointCloud(pts), config)
            cloud_cache[rel] = (pts, members, centers, neighbors)
        return cloud_cache[rel]

    outputs: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            pts, members, centers, neighbors, texts = [], [], [], [], []
            for offset, rec in enumerate(chunk):
                p, m, c, nb = cloud_arrays(rec.input)
                pts.append(p)
                members.append(m)
                centers.append(c)
                neighbors.append(nb)
                text = rec.instruct
                if instruct_override and (start + offset) in instruct_override:
                    text = instruct_override[start + offset]
                texts.append(text)
            batch = model.forward(
                torch.from_numpy(np.stack(pts)),
                torch.from_numpy(np.stack(members)),
                torch.from_numpy(np.stack(centers)),
                texts,
                neighbor_idx=torch.from_numpy(np.stack(neighbors)),
                straight_through=False,
            )
            outputs.extend(batch["scores"].numpy())
    return outputs


def pool_by_affordance(
    records: list[DatasetRecord], predictions: list[np.ndarray], root: str | Path
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    root = Path(root)
    buckets: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for rec, scores in zip(records, predictions):
        gt = load_scores(root / rec.affordance_path)
        buckets.setdefault(rec.affordance, []).append((scores, gt))
    return {
        name: (
            np.concatenate([s for s, _ in pairs]),
            np.concatenate([g for _, g in pairs]),
        )
        for name, pairs in buckets.items()
    }


def evaluate_model(
    model: AffordanceModel,
    records: list[DatasetRecord],
    root: str | Path,
    gt_threshold: float = 0.5,
    metadata: dict | None = None,
) -> MetricsReport:
    """Pool scores per affordance over the whole split and compute the report."""
    if not records:
        raise ValueError("cannot evaluate an empty split")
    predictions = predict_records(model, records, root)
    pooled = pool_by_affordance(records, predictions, root)
    return compute_report(pooled, gt_threshold=gt_threshold, metadata=metadata)


def rewrite_instruction(record: DatasetRecord, variant: str, vocab: AffordanceVocabulary) -> str:
    """Instruction text for one prompt-ablation variant."""
    if variant == "hi":
        return "Hi"
    if variant == "action":
        return record.affordance
    if variant == "object_action":
        return f"{record.category} {record.affordance}"
    if variant == "full_question":
        return render_seed_qa(record.category, vocab.get(record.affordance)).instruct_text
    if variant == "augmented":
        return rule_paraphrase(record.category, vocab.get(record.affordance), 1, seed=0)[0].instruct_text
    raise ValueError(f"unknown prompt variant {variant!r}; known: {PROMPT_VARIANTS}")


def prompt_ablation(
    model: AffordanceModel,
    records: list[DatasetRecord],
    root: str | Path,
    variant: str,
    manifest: DatasetManifest,
    gt_threshold: float = 0.5,
) -> MetricsReport:
    """Evaluate with every record's instruction rewritten per the variant."""
    vocab = manifest.vocabulary()
    override = {i: rewrite_instruction(rec, variant, vocab) for i, rec in enumerate(records)}
    predictions = predict_records(model, records, root, instruct_override=override)
    pooled = pool_by_affordance(records, predictions, root)
    return compute_report(
        pooled, gt_threshold=gt_threshold, metadata={"prompt_variant": variant}
    )
