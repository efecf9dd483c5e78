"""Loss functions for the three training stages.

All probability inputs are softmax outputs over the last axis. Logs are
natural and every probability is clamped to at least 1e-12 before a log
so exact zeros never produce NaN or -inf; a hard zero in the weighting
slot (t * log p with t = 0) contributes exactly zero.

The stage composites take model parts explicitly and enforce their
gradient-flow contracts by construction: features feeding a loss that
must not train the encoder are computed without a graph.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import torch

from .errors import ConfigError
from .models import DualBranchModel, classify, softmax

LOG_EPS = 1e-12


def _as_tensor(value, dtype=None) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(value, dtype=dtype or torch.get_default_dtype())


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=LOG_EPS))


@dataclasses.dataclass(frozen=True)
class FocalParams:
    """Focusing exponent and optional per-class weights (None = all ones)."""

    gamma: float = 2.0
    alpha: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            if any(a <= 0 for a in self.alpha):
                raise ConfigError(f"alpha weights must be positive, got {self.alpha}")


def focal_alpha_from_counts(counts: Sequence[int]) -> tuple[float, ...]:
    """Inverse class-frequency weights, normalized to mean 1."""
    counts = [int(c) for c in counts]
    if any(c < 1 for c in counts):
        raise ConfigError(f"class counts must be >= 1, got {counts}")
    inv = [1.0 / c for c in counts]
    mean = sum(inv) / len(inv)
    return tuple(w / mean for w in inv)


def focal_loss(probs, labels, params: FocalParams) -> torch.Tensor:
    """-alpha_y (1 - p_y)^gamma ln p_y per sample; no reduction."""
    p = _as_tensor(probs)
    y = _as_tensor(labels, dtype=torch.long)
    p_y = p.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    modulator = (1.0 - p_y).clamp(min=0.0) ** params.gamma
    loss = -modulator * _clamped_log(p_y)
    if params.alpha is not None:
        alpha = torch.as_tensor(params.alpha, dtype=p.dtype, device=p.device)
        loss = alpha[y] * loss
    return loss


def _matched(p1, p2) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = _as_tensor(p1), _as_tensor(p2)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"class counts differ: {a.shape[-1]} vs {b.shape[-1]}")
    return a, b


def discrepancy(p1, p2) -> torch.Tensor:
    """Mean absolute difference across class probabilities, per sample."""
    a, b = _matched(p1, p2)
    return (a - b).abs().mean(dim=-1)


def kl_divergence(p, q) -> torch.Tensor:
    """KL(p || q) with clamped logs; an exact zero in p contributes zero."""
    a, b = _matched(p, q)
    return (a * (_clamped_log(a) - _clamped_log(b))).sum(dim=-1)


def jsd(p1, p2) -> torch.Tensor:
    """Jensen-Shannon divergence; symmetric, bounded by ln 2."""
    a, b = _matched(p1, p2)
    m = 0.5 * (a + b)
    return 0.5 * kl_divergence(a, m) + 0.5 * kl_divergence(b, m)


def soft_cross_entropy(probs, targets) -> torch.Tensor:
    """-sum_k t_k ln p_k per sample against a soft target distribution."""
    p, t = _as_tensor(probs), _as_tensor(targets)
    return -(t * _clamped_log(p)).sum(dim=-1)


def pseudo_label(snapshot_probs, weak_probs) -> torch.Tensor:
    """Equal-weight fusion of the snapshot and current weak-view predictions."""
    return 0.5 * (_as_tensor(snapshot_probs) + _as_tensor(weak_probs))


def confidence_mask(probs, threshold: float) -> torch.Tensor:
    """True where the top class probability strictly exceeds the threshold."""
    return _as_tensor(probs).max(dim=-1).values > threshold


def stage1_loss(encoder, head, x: torch.Tensor, y: torch.Tensor, params: FocalParams) -> torch.Tensor:
    """Mean focal loss of one branch on labeled volumes."""
    probs = softmax(classify(head, encoder(x)))
    return focal_loss(probs, y, params).mean()


def stage2_boundary_loss(
    model: DualBranchModel,
    target_x: torch.Tensor,
    source_x: torch.Tensor | None,
    source_y: torch.Tensor | None,
    params: FocalParams,
    feature_branch: str = "v",
) -> torch.Tensor:
    """Push the two heads apart on target while staying right on source.

    Both heads read the same frozen-encoder features of the target batch;
    their mean discrepancy enters negatively (maximized). The supervised
    focal terms keep each head anchored to the source task. Encoder
    features carry no graph, so gradient reaches only the two heads.
    """
    encoder = model.branch_v.encoder if feature_branch == "v" else model.branch_c.encoder
    with torch.no_grad():
        target_feats = encoder(target_x)
    f1 = softmax(classify(model.branch_v.classifier, target_feats))
    f2 = softmax(classify(model.branch_c.classifier, target_feats))
    loss = -discrepancy(f1, f2).mean()
    if source_x is not None and len(source_x) > 0:
        with torch.no_grad():
            src_v = model.branch_v.encoder(source_x)
            src_c = model.branch_c.encoder(source_x)
        probs_v = softmax(classify(model.branch_v.classifier, src_v))
        probs_c = softmax(classify(model.branch_c.classifier, src_c))
        loss = loss + focal_loss(probs_v, source_y, params).mean()
        loss = loss + focal_loss(probs_c, source_y, params).mean()
    return loss


def stage2_consolidation_loss(
    model: DualBranchModel, target_x: torch.Tensor, feature_branch: str = "c"
) -> torch.Tensor:
    """Pull the adapted encoder toward features both heads agree on.

    Gradient flows through both (frozen) heads into the encoder under
    adaptation; the caller keeps head parameters out of the optimizer.
    """
    encoder = model.branch_v.encoder if feature_branch == "v" else model.branch_c.encoder
    feats = encoder(target_x)
    p1 = softmax(classify(model.branch_v.classifier, feats))
    p2 = softmax(classify(model.branch_c.classifier, feats))
    return discrepancy(p1, p2).mean()


def cross_branch_loss(
    model: DualBranchModel,
    direction: str,
    strong_x: torch.Tensor,
    pseudo_labels: torch.Tensor,
    threshold: float,
) -> tuple[torch.Tensor, int]:
    """Confidence-masked soft CE of one student branch on strong views.

    direction "v2c" teaches branch_c from branch_v's pseudo-labels and
    vice versa. pseudo_labels must already be constants (teachers are
    detached upstream). Returns (loss, passing count); a zero-pass batch
    yields a graph-free zero, so the caller must not step on count 0.
    """
    if direction not in ("v2c", "c2v"):
        raise ConfigError(f"direction must be 'v2c' or 'c2v', got {direction!r}")
    student = model.branch_c if direction == "v2c" else model.branch_v
    mask = confidence_mask(pseudo_labels, threshold)
    count = int(mask.sum())
    if count == 0:
        return torch.zeros((), dtype=strong_x.dtype), 0
    probs = softmax(classify(student.classifier, student.encoder(strong_x[mask])))
    return soft_cross_entropy(probs, pseudo_labels[mask]).mean(), count
