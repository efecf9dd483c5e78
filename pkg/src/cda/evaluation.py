"""Metrics, cross-validation splits, aggregation, and paired comparison.

Binary tasks treat class 1 as positive. Multi-class tasks (K >= 3) are
scored one-vs-rest: per-class sensitivity is the recall of that class,
overall sensitivity its unweighted mean, per-class accuracy the binary
accuracy of the k-vs-rest decision. Aggregates report mean plus
population standard deviation.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping, Sequence

import numpy as np
from scipy import stats


@dataclasses.dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    test_ids: tuple[str, ...]
    train_ids: tuple[str, ...]
    repeat_seed: int


def stratified_kfold(
    ids_by_class: Mapping[int, Sequence[str]], k: int = 5, seed: int = 0
) -> list[FoldSplit]:
    """Split each class independently into k near-equal chunks.

    Fold j tests the j-th chunk of every class, so per-class test counts
    differ by at most one across folds. Deterministic in (ids, k, seed).
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    total = sum(len(ids) for ids in ids_by_class.values())
    if total < k:
        raise ValueError(f"cannot build {k} folds from {total} samples")
    rng = np.random.default_rng(seed)
    chunks_by_class = {}
    for class_id in sorted(ids_by_class):
        ids = list(ids_by_class[class_id])
        perm = rng.permutation(len(ids))
        chunks_by_class[class_id] = np.array_split([ids[i] for i in perm], k)
    splits = []
    for fold in range(k):
        test: list[str] = []
        train: list[str] = []
        for class_id in sorted(chunks_by_class):
            for j, chunk in enumerate(chunks_by_class[class_id]):
                (test if j == fold else train).extend(chunk)
        splits.append(
            FoldSplit(
                fold_index=fold,
                test_ids=tuple(test),
                train_ids=tuple(train),
                repeat_seed=seed,
            )
        )
    return splits


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts with true labels on rows, predictions on columns."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.size == 0:
        raise ValueError("metrics are undefined on an empty prediction set")
    if p.shape != y.shape:
        raise ValueError(f"preds and labels differ in length: {p.shape} vs {y.shape}")
    if p.min() < 0 or p.max() >= num_classes or y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"class ids out of range for K={num_classes}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"zero_denominator_{name}")
        return 0.0
    return num / den


def binary_metrics(cm: np.ndarray) -> dict:
    """acc, sen, spe, f1 from a 2x2 confusion matrix; class 1 is positive."""
    if cm.shape != (2, 2):
        raise ValueError(f"binary metrics need a 2x2 matrix, got {cm.shape}")
    tn, fp = int(cm[0, 0]), int(cm[0, 1])
    fn, tp = int(cm[1, 0]), int(cm[1, 1])
    total = tn + fp + fn + tp
    if total == 0:
        raise ValueError("metrics are undefined on an empty prediction set")
    flags: list[str] = []
    return {
        "acc": (tp + tn) / total,
        "sen": _ratio(tp, tp + fn, "sen", flags),
        "spe": _ratio(tn, tn + fp, "spe", flags),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn, "f1", flags),
        "flags": flags,
    }


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties get 0.5.

    Midrank formulation, equivalent to exhaustive pair counting.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.size == 0:
        raise ValueError("AUC is undefined on an empty set")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = stats.rankdata(s, method="average")
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def one_vs_rest_metrics(preds, labels, num_classes: int) -> dict:
    """Micro accuracy plus per-class one-vs-rest accuracy and recall."""
    cm = confusion_matrix(preds, labels, num_classes)
    total = int(cm.sum())
    flags: list[str] = []
    per_class_acc = []
    per_class_sen = []
    for k in range(num_classes):
        tp = int(cm[k, k])
        fn = int(cm[k].sum()) - tp
        fp = int(cm[:, k].sum()) - tp
        tn = total - tp - fn - fp
        per_class_acc.append((tp + tn) / total)
        per_class_sen.append(_ratio(tp, tp + fn, f"sen_{k}", flags))
    return {
        "acc": float(np.trace(cm)) / total,
        "sen": float(np.mean(per_class_sen)),
        "per_class_acc": per_class_acc,
        "per_class_sen": per_class_sen,
        "flags": flags,
    }


def compute_metrics(preds, labels, probs, num_classes: int) -> dict:
    """Metric bundle for one evaluation set; scores for AUC are P(class 1)."""
    if num_classes == 2:
        metrics = binary_metrics(confusion_matrix(preds, labels, 2))
        metrics["auc"] = auc(np.asarray(probs)[:, 1], labels)
        return metrics
    return one_vs_rest_metrics(preds, labels, num_classes)


@dataclasses.dataclass(frozen=True)
class TTestResult:
    statistic: float
    df: int
    p_value: float
    flags: tuple[str, ...] = ()


def paired_t_test(series_a, series_b) -> TTestResult:
    """Two-sided paired Student t-test on matched metric series.

    All-zero differences return p = 1.0; zero-variance nonzero
    differences return p = 0.0 with a zero_variance flag, standing in
    for the p -> 0 limit.
    """
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired series must be 1-D and equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    diffs = a - b
    df = n - 1
    if np.all(diffs == 0):
        return TTestResult(statistic=0.0, df=df, p_value=1.0, flags=("zero_differences",))
    sd = diffs.std(ddof=1)
    if sd == 0:
        return TTestResult(
            statistic=float("inf") if diffs.mean() > 0 else float("-inf"),
            df=df,
            p_value=0.0,
            flags=("zero_variance",),
        )
    t = diffs.mean() / (sd / np.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), df))
    return TTestResult(statistic=float(t), df=df, p_value=p)


def aggregate_metrics(cells: Sequence[Mapping]) -> dict:
    """Mean and population std per metric over fold cells.

    Scalar metrics aggregate directly; list-valued metrics (per-class)
    aggregate elementwise. Flags and non-numeric entries are skipped.
    Permutation-invariant: cells are reduced with numpy over the stack.
    """
    if not cells:
        raise ValueError("nothing to aggregate")
    out: dict = {}
    first = cells[0]
    for key in first:
        if key == "flags":
            continue
        values = [cell[key] for cell in cells if key in cell]
        if len(values) != len(cells) or any(v is None for v in values):
            continue
        if isinstance(first[key], (list, tuple)):
            arr = np.asarray(values, dtype=np.float64)
            out[key] = [
                {"mean": float(arr[:, i].mean()), "std": float(arr[:, i].std(ddof=0))}
                for i in range(arr.shape[1])
            ]
        else:
            arr = np.asarray(values, dtype=np.float64)
            out[key] = {"mean": float(arr.mean()), "std": float(arr.std(ddof=0))}
    return out
