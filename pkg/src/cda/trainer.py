"""Three-stage training driver for the dual-branch model.

Stage 1 trains both branches on labeled source volumes with focal loss.
Stage 2 adapts one encoder to unlabeled target volumes by alternating,
within every mixed batch, a boundary step (heads pushed apart on target,
anchored on source) and a consolidation step (adapted encoder pulled
toward head agreement). Stage 3 co-trains the branches on target only:
each branch pseudo-labels weak views, gated by the divergence between
its snapshot head and its current head, and teaches the other branch on
strong views through a confidence-masked soft cross-entropy.

Modules under a freeze contract are fingerprinted and re-checked every
epoch (optionally every optimizer step); a mismatch aborts the run.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import math
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from . import evaluation
from .augment import AugmentPolicy, default_strong_policy, default_weak_policy, weak_augment, strong_augment
from .datagen import derive_seed
from .errors import ConfigError, FreezeViolationError
from .losses import (
    FocalParams,
    cross_branch_loss,
    discrepancy,
    focal_alpha_from_counts,
    jsd,
    pseudo_label,
    stage1_loss,
    stage2_boundary_loss,
    stage2_consolidation_loss,
)
from .models import (
    ClassifierConfig,
    CnnConfig,
    DualBranchModel,
    VitConfig,
    build_model,
    classify,
    fingerprint,
    save_checkpoint,
    softmax,
)
from .volume import Volume

LN2 = math.log(2.0)
# Slack on the gate bound: divergences can exceed ln 2 by rounding only.
TAU_SLACK = 1e-9


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """Momentum SGD settings; classifier heads inherit their encoder's rate."""

    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_vit: float = 1e-4
    lr_cnn: float = 5e-4
    lr_classifiers: float | None = None
    batch_size: int = 4

    def __post_init__(self) -> None:
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.lr_vit <= 0 or self.lr_cnn <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_classifiers is not None and self.lr_classifiers <= 0:
            raise ConfigError("lr_classifiers must be positive when set")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")

    def encoder_lr(self, kind: str) -> float:
        return self.lr_vit if kind == "vit" else self.lr_cnn

    def classifier_lr(self, owner_kind: str) -> float:
        return self.lr_classifiers if self.lr_classifiers is not None else self.encoder_lr(owner_kind)


@dataclasses.dataclass(frozen=True)
class StagePlan:
    epochs_stage1: int = 20
    epochs_stage2: int = 10
    epochs_stage3: int = 10
    tau: float = 0.1
    theta1: float = 0.5
    theta2: float = 0.8
    verify_freeze_per_step: bool = False

    def __post_init__(self) -> None:
        for name in ("epochs_stage1", "epochs_stage2", "epochs_stage3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.tau <= LN2 + TAU_SLACK:
            raise ConfigError(f"tau must be in (0, ln 2], got {self.tau}")
        for name in ("theta1", "theta2"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {value}")

    def validate_for_classes(self, num_classes: int) -> None:
        # The mask is strict (max > theta), so theta = 1/K still rejects
        # exactly-uniform predictions; anything below 1/K passes everything.
        floor = 1.0 / num_classes
        for name in ("theta1", "theta2"):
            if getattr(self, name) < floor:
                raise ConfigError(
                    f"{name} = {getattr(self, name)} is never selective with "
                    f"{num_classes} classes (needs at least 1/K = {floor:.4f})"
                )


def sgd_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    velocity: torch.Tensor,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One momentum-SGD update, pure form: returns (new_param, new_velocity).

    g <- grad + wd * p ; v <- mu * v + g ; p <- p - lr * v
    """
    g = grad + weight_decay * param
    v = momentum * velocity + g
    return param - lr * v, v


class MomentumSgd:
    """Minimal momentum-SGD over (params, lr) groups using sgd_step's update rule.

    Parameters without a gradient (frozen or unused this step) are skipped
    entirely: no decay, no velocity change.
    """

    def __init__(self, groups: Sequence[tuple[Sequence[nn.Parameter], float]], momentum: float, weight_decay: float) -> None:
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, torch.Tensor] = {}

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                buf = self._velocity.get(id(p))
                if buf is None:
                    buf = torch.zeros_like(p)
                new_p, new_v = sgd_step(p, p.grad, buf, lr, self.momentum, self.weight_decay)
                p.copy_(new_p)
                self._velocity[id(p)] = new_v


def balanced_batches(
    n_source: int, n_target: int, batch_size: int, seed: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of mixed batches: ceil(B/2) source + floor(B/2) target indices.

    The target stream defines the epoch, floor(n_target / floor(B/2))
    batches; the shuffled source stream recycles cyclically to fill its
    half. Same seed, same sequence.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if n_source < 1 or n_target < 1:
        raise ConfigError("balanced batches need at least one sample per domain")
    per_src = -(-batch_size // 2)
    per_tgt = batch_size // 2
    rng = np.random.default_rng(seed)
    src_order = rng.permutation(n_source)
    tgt_order = rng.permutation(n_target)
    n_batches = n_target // per_tgt
    for b in range(n_batches):
        src_idx = src_order[np.arange(b * per_src, (b + 1) * per_src) % n_source]
        tgt_idx = tgt_order[b * per_tgt : (b + 1) * per_tgt]
        yield src_idx, tgt_idx


@dataclasses.dataclass
class TrainingData:
    """Arrays the trainer consumes; eval labels are never seen in training."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    eval_ids: list[str] = dataclasses.field(default_factory=list)


def _to_batch(x: np.ndarray, idx: np.ndarray | None = None) -> torch.Tensor:
    """Stack volumes into a (N, 1, D, H, W) batch, z-scored per volume.

    Per-volume standardization stands in for the cross-site intensity
    normalization a real pipeline applies before training; without it the
    benchmark's gain/gamma shift dominates both encoders.
    """
    arr = np.asarray(x if idx is None else x[idx], dtype=np.float32)
    flat = arr.reshape(len(arr), -1)
    mean = flat.mean(axis=1).reshape(-1, 1, 1, 1)
    std = flat.std(axis=1).reshape(-1, 1, 1, 1)
    arr = (arr - mean) / (std + 1e-6)
    return torch.from_numpy(np.ascontiguousarray(arr)).unsqueeze(1)


@contextlib.contextmanager
def _frozen(*modules: nn.Module):
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, prev in saved:
            p.requires_grad_(prev)


class CdaTrainer:
    """Runs the three stages on one model, keeping a structured epoch log."""

    def __init__(
        self,
        model: DualBranchModel,
        plan: StagePlan,
        opt: OptimizerConfig,
        seed: int,
        focal: FocalParams,
    ) -> None:
        plan.validate_for_classes(model.num_classes)
        self.model = model
        self.plan = plan
        self.opt = opt
        self.seed = seed
        self.focal = focal
        self.log: list[dict] = []
        self.counters: dict[str, int] = {
            "stage1_epochs": 0,
            "stage2_epochs": 0,
            "stage3_epochs": 0,
            "boundary_steps": 0,
            "consolidation_steps": 0,
            "v2c_steps": 0,
            "c2v_steps": 0,
        }

    # -- helpers -------------------------------------------------------------

    def _branch_optimizer(self, branch) -> MomentumSgd:
        groups = [
            (list(branch.encoder.parameters()), self.opt.encoder_lr(branch.kind)),
            (list(branch.classifier.parameters()), self.opt.classifier_lr(branch.kind)),
        ]
        return MomentumSgd(groups, self.opt.momentum, self.opt.weight_decay)

    def _check_loss(self, value: float, where: str) -> None:
        if not math.isfinite(value):
            raise FreezeViolationError(f"non-finite loss ({value}) in {where}")

    def _verify(self, expected: dict[str, str], where: str) -> None:
        for name, fp in expected.items():
            actual = fingerprint(dict(self.model.components())[name])
            if actual != fp:
                raise FreezeViolationError(
                    f"frozen component {name} changed during {where}"
                )

    def _plain_batches(self, n: int, epoch_seed: int) -> Iterator[np.ndarray]:
        order = np.random.default_rng(epoch_seed).permutation(n)
        for start in range(0, n, self.opt.batch_size):
            yield order[start : start + self.opt.batch_size]

    # -- stage 1 ---------------------------------------------------------------

    def run_stage1(self, source_x: np.ndarray, source_y: np.ndarray) -> None:
        """Supervised focal training of both branches; snapshots taken at the end."""
        if len(source_x) == 0:
            raise ConfigError("stage 1 needs labeled source samples")
        y_all = torch.from_numpy(source_y)
        opt_v = self._branch_optimizer(self.model.branch_v)
        opt_c = self._branch_optimizer(self.model.branch_c)
        for epoch in range(self.plan.epochs_stage1):
            sums = {"loss_v": 0.0, "loss_c": 0.0}
            n_batches = 0
            for idx in self._plain_batches(len(source_x), derive_seed(self.seed, "stage1", epoch)):
                x = _to_batch(source_x, idx)
                y = y_all[idx]
                for branch, opt, key in (
                    (self.model.branch_v, opt_v, "loss_v"),
                    (self.model.branch_c, opt_c, "loss_c"),
                ):
                    loss = stage1_loss(branch.encoder, branch.classifier, x, y, self.focal)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    self._check_loss(loss.item(), f"stage1 {key}")
                    sums[key] += loss.item()
                n_batches += 1
            self.counters["stage1_epochs"] += 1
            self.log.append(
                {
                    "stage": 1,
                    "epoch": epoch,
                    "loss_v": sums["loss_v"] / n_batches,
                    "loss_c": sums["loss_c"] / n_batches,
                }
            )
        self.model.take_snapshots()

    # -- stage 2 ---------------------------------------------------------------

    def _stage2_probes(self, probe_x: torch.Tensor, boundary_branch: str, adapted_branch: str) -> tuple[float, float]:
        """(head disagreement on frozen-branch features, on adapted-branch features)."""
        model = self.model
        with torch.no_grad():
            enc_b = model.branch_v.encoder if boundary_branch == "v" else model.branch_c.encoder
            enc_a = model.branch_v.encoder if adapted_branch == "v" else model.branch_c.encoder
            fb = enc_b(probe_x)
            fa = enc_a(probe_x)
            dl_boundary = discrepancy(
                softmax(classify(model.branch_v.classifier, fb)),
                softmax(classify(model.branch_c.classifier, fb)),
            ).mean().item()
            dl_adapted = discrepancy(
                softmax(classify(model.branch_v.classifier, fa)),
                softmax(classify(model.branch_c.classifier, fa)),
            ).mean().item()
        return dl_boundary, dl_adapted

    def run_stage2(
        self,
        source_x: np.ndarray,
        source_y: np.ndarray,
        target_x: np.ndarray,
        reversed_roles: bool = False,
        phases: tuple[str, ...] = ("boundary", "consolidation"),
        epochs: int | None = None,
    ) -> None:
        """Alternating boundary/consolidation adaptation on mixed batches.

        Normal roles freeze the ViT encoder and adapt the CNN encoder;
        reversed_roles swaps them. phases restricts which step types run,
        for isolating either objective; default runs both per batch.
        """
        if len(target_x) == 0:
            raise ConfigError("stage 2 needs unlabeled target samples")
        unknown = set(phases) - {"boundary", "consolidation"}
        if unknown:
            raise ConfigError(f"unknown stage-2 phases: {sorted(unknown)}")
        model = self.model
        boundary_branch = "c" if reversed_roles else "v"
        adapted_branchname = "v" if reversed_roles else "c"
        frozen_branch = model.branch_c if reversed_roles else model.branch_v
        adapted_branch = model.branch_v if reversed_roles else model.branch_c
        frozen_name = "encoder_c" if reversed_roles else "encoder_v"

        heads = [model.branch_v.classifier, model.branch_c.classifier]
        opt_heads = MomentumSgd(
            [
                ([*model.branch_v.classifier.parameters()], self.opt.classifier_lr(model.branch_v.kind)),
                ([*model.branch_c.classifier.parameters()], self.opt.classifier_lr(model.branch_c.kind)),
            ],
            self.opt.momentum,
            self.opt.weight_decay,
        )
        opt_encoder = MomentumSgd(
            [(list(adapted_branch.encoder.parameters()), self.opt.encoder_lr(adapted_branch.kind))],
            self.opt.momentum,
            self.opt.weight_decay,
        )

        frozen_fp = {frozen_name: fingerprint(frozen_branch.encoder)}
        if model.snapshot_v is not None:
            frozen_fp["snapshot_v"] = fingerprint(model.snapshot_v)
            frozen_fp["snapshot_c"] = fingerprint(model.snapshot_c)

        y_all = torch.from_numpy(source_y)
        probe_x = _to_batch(target_x, np.arange(min(len(target_x), 16)))
        dl_b, dl_a = self._stage2_probes(probe_x, boundary_branch, adapted_branchname)
        self.log.append(
            {
                "stage": 2,
                "event": "start",
                "frozen_encoder": frozen_name,
                "probe_boundary_dl": dl_b,
                "probe_adapted_dl": dl_a,
            }
        )

        n_epochs = self.plan.epochs_stage2 if epochs is None else epochs
        for epoch in range(n_epochs):
            sums = {"boundary": 0.0, "consolidation": 0.0}
            counts = {"boundary": 0, "consolidation": 0}
            batch_seed = derive_seed(self.seed, "stage2", epoch)
            for src_idx, tgt_idx in balanced_batches(
                len(source_x), len(target_x), self.opt.batch_size, batch_seed
            ):
                src_batch = _to_batch(source_x, src_idx)
                tgt_batch = _to_batch(target_x, tgt_idx)
                if "boundary" in phases:
                    enc_fp = None
                    if self.plan.verify_freeze_per_step:
                        enc_fp = [fingerprint(model.branch_v.encoder), fingerprint(model.branch_c.encoder)]
                    with _frozen(frozen_branch.encoder, adapted_branch.encoder):
                        loss = stage2_boundary_loss(
                            model, tgt_batch, src_batch, y_all[src_idx], self.focal,
                            feature_branch=boundary_branch,
                        )
                        opt_heads.zero_grad()
                        loss.backward()
                        opt_heads.step()
                    self._check_loss(loss.item(), "stage2 boundary")
                    sums["boundary"] += loss.item()
                    counts["boundary"] += 1
                    self.counters["boundary_steps"] += 1
                    if enc_fp is not None and [
                        fingerprint(model.branch_v.encoder),
                        fingerprint(model.branch_c.encoder),
                    ] != enc_fp:
                        raise FreezeViolationError("an encoder changed during a boundary step")
                if "consolidation" in phases:
                    head_fp = None
                    if self.plan.verify_freeze_per_step:
                        head_fp = [fingerprint(h) for h in heads]
                    with _frozen(*heads):
                        loss = stage2_consolidation_loss(
                            model, tgt_batch, feature_branch=adapted_branchname
                        )
                        opt_encoder.zero_grad()
                        loss.backward()
                        opt_encoder.step()
                    self._check_loss(loss.item(), "stage2 consolidation")
                    sums["consolidation"] += loss.item()
                    counts["consolidation"] += 1
                    self.counters["consolidation_steps"] += 1
                    if head_fp is not None and [fingerprint(h) for h in heads] != head_fp:
                        raise FreezeViolationError(
                            "classifier heads changed during a consolidation step"
                        )
                if self.plan.verify_freeze_per_step:
                    self._verify(frozen_fp, "stage2 step")
            self.counters["stage2_epochs"] += 1
            self._verify(frozen_fp, f"stage2 epoch {epoch}")
            dl_b, dl_a = self._stage2_probes(probe_x, boundary_branch, adapted_branchname)
            record = {
                "stage": 2,
                "epoch": epoch,
                "frozen_encoder": frozen_name,
                "freeze_ok": True,
                "probe_boundary_dl": dl_b,
                "probe_adapted_dl": dl_a,
            }
            for key in ("boundary", "consolidation"):
                if counts[key]:
                    record[f"loss_{key}"] = sums[key] / counts[key]
            self.log.append(record)

    # -- stage 3 ---------------------------------------------------------------

    def _augment_pair(
        self, x: np.ndarray, dataset_idx: np.ndarray, epoch: int,
        weak_policy: AugmentPolicy, strong_policy: AugmentPolicy,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        weak = np.empty_like(x[dataset_idx])
        strong = np.empty_like(x[dataset_idx])
        for row, i in enumerate(dataset_idx):
            vol = Volume(data=x[i])
            weak[row] = weak_augment(vol, derive_seed(self.seed, "aug", epoch, int(i), "weak"), weak_policy).data
            strong[row] = strong_augment(vol, derive_seed(self.seed, "aug", epoch, int(i), "strong"), strong_policy).data
        return _to_batch(weak), _to_batch(strong)

    def run_stage3(
        self,
        target_x: np.ndarray,
        directions: tuple[str, ...] = ("v2c", "c2v"),
        weak_policy: AugmentPolicy | None = None,
        strong_policy: AugmentPolicy | None = None,
        epochs: int | None = None,
    ) -> None:
        """Collaborative co-training on target with gated fused pseudo-labels.

        Per batch, both branches read the weak view without a graph; a
        sample contributes to a direction only if the teaching branch's
        snapshot and current heads agree under the JSD gate. Both
        direction losses are computed from the same pre-update weights,
        then both students step.
        """
        if len(target_x) == 0:
            raise ConfigError("stage 3 needs target samples")
        if self.model.snapshot_v is None:
            raise ConfigError("stage 3 needs classifier snapshots (run stage 1 or snapshot at init)")
        bad = set(directions) - {"v2c", "c2v"}
        if bad:
            raise ConfigError(f"unknown stage-3 directions: {sorted(bad)}")
        weak_policy = weak_policy or default_weak_policy()
        strong_policy = strong_policy or default_strong_policy()
        model = self.model
        opt_v = self._branch_optimizer(model.branch_v)
        opt_c = self._branch_optimizer(model.branch_c)
        snap_fp = {
            "snapshot_v": fingerprint(model.snapshot_v),
            "snapshot_c": fingerprint(model.snapshot_c),
        }
        thresholds = {"v2c": self.plan.theta1, "c2v": self.plan.theta2}

        n_epochs = self.plan.epochs_stage3 if epochs is None else epochs
        for epoch in range(n_epochs):
            sums = {"v2c": 0.0, "c2v": 0.0}
            step_counts = {"v2c": 0, "c2v": 0}
            gate_pass = {"v": 0, "c": 0}
            mask_pass = {"v2c": 0, "c2v": 0}
            seen = 0
            for idx in self._plain_batches(len(target_x), derive_seed(self.seed, "stage3", epoch)):
                weak_x, strong_x = self._augment_pair(
                    target_x, idx, epoch, weak_policy, strong_policy
                )
                seen += len(idx)
                with torch.no_grad():
                    teacher = {}
                    for name, branch, snapshot in (
                        ("v", model.branch_v, model.snapshot_v),
                        ("c", model.branch_c, model.snapshot_c),
                    ):
                        feats = branch.encoder(weak_x)
                        snap_probs = softmax(classify(snapshot, feats))
                        weak_probs = softmax(classify(branch.classifier, feats))
                        gate = jsd(snap_probs, weak_probs) < self.plan.tau
                        fused = pseudo_label(snap_probs, weak_probs)
                        teacher[name] = (gate, fused)
                        gate_pass[name] += int(gate.sum())

                losses = []
                for direction in directions:
                    teacher_name = "v" if direction == "v2c" else "c"
                    gate, fused = teacher[teacher_name]
                    if not bool(gate.any()):
                        continue
                    loss, passed = cross_branch_loss(
                        model, direction, strong_x[gate], fused[gate], thresholds[direction]
                    )
                    mask_pass[direction] += passed
                    if passed > 0:
                        losses.append((direction, loss))

                # Both losses come from pre-update parameters; step after all
                # gradients exist. The two students have disjoint parameters.
                for direction, loss in losses:
                    opt = opt_c if direction == "v2c" else opt_v
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    self._check_loss(loss.item(), f"stage3 {direction}")
                    sums[direction] += loss.item()
                    step_counts[direction] += 1
                    self.counters[f"{direction}_steps"] += 1
                if self.plan.verify_freeze_per_step:
                    self._verify(snap_fp, "stage3 step")
            self.counters["stage3_epochs"] += 1
            self._verify(snap_fp, f"stage3 epoch {epoch}")
            record = {
                "stage": 3,
                "epoch": epoch,
                "gate_rate_v": gate_pass["v"] / seen,
                "gate_rate_c": gate_pass["c"] / seen,
            }
            for direction in directions:
                record[f"loss_{direction}"] = (
                    sums[direction] / step_counts[direction] if step_counts[direction] else None
                )
                record[f"mask_rate_{direction}"] = mask_pass[direction] / seen
            self.log.append(record)


BRANCH_ALIASES = {"v": "v", "c": "c", "vit": "v", "cnn": "c"}


def resolve_branch(name: str) -> str:
    if name not in BRANCH_ALIASES:
        raise ConfigError(f"inference branch must be one of {sorted(BRANCH_ALIASES)}, got {name!r}")
    return BRANCH_ALIASES[name]


def predict(
    model: DualBranchModel, x: np.ndarray, branch: str = "cnn", batch_size: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Labels and probabilities from one branch; ties go to the lower class index."""
    selected = model.branch_v if resolve_branch(branch) == "v" else model.branch_c
    probs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            batch = _to_batch(x[start : start + batch_size])
            probs.append(softmax(selected(batch)).numpy())
    all_probs = np.concatenate(probs, axis=0)
    labels = np.argmax(all_probs, axis=1).astype(np.int64)
    return labels, all_probs


@dataclasses.dataclass(frozen=True)
class VariantSpec:
    stages: tuple[int, ...]
    directions: tuple[str, ...] = ("v2c", "c2v")
    reversed_roles: bool = False
    inference_branch: str = "c"
    encoder_kinds: tuple[str, str] = ("vit", "cnn")


VARIANTS: dict[str, VariantSpec] = {
    "full": VariantSpec(stages=(1, 2, 3)),
    "s1": VariantSpec(stages=(1,)),
    "s12": VariantSpec(stages=(1, 2)),
    "s13": VariantSpec(stages=(1, 3)),
    "s23": VariantSpec(stages=(2, 3)),
    "v2c": VariantSpec(stages=(1, 2, 3), directions=("v2c",)),
    "c2v": VariantSpec(stages=(1, 2, 3), directions=("c2v",)),
    "reversed": VariantSpec(stages=(1, 2, 3), reversed_roles=True),
    "infer_vit": VariantSpec(stages=(1, 2, 3), inference_branch="v"),
    "cnn_cnn": VariantSpec(stages=(1, 2, 3), encoder_kinds=("cnn", "cnn")),
    "vit_vit": VariantSpec(stages=(1, 2, 3), encoder_kinds=("vit", "vit")),
}


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    vit: VitConfig = VitConfig()
    cnn: CnnConfig = CnnConfig()
    classifier: ClassifierConfig = ClassifierConfig()


def run_variant(
    variant: str,
    data: TrainingData,
    model_spec: ModelSpec,
    plan: StagePlan,
    opt: OptimizerConfig,
    seed: int,
    run_dir: str | Path | None = None,
    save_checkpoints: bool = True,
    focal: FocalParams | None = None,
    inference_branch: str | None = None,
) -> tuple[DualBranchModel, dict]:
    """Train one pipeline variant end to end and evaluate on the held-out set.

    Writes log.jsonl, per-stage checkpoints, and report.json under
    run_dir when given. Returns the trained model and the report dict.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; valid: {', '.join(sorted(VARIANTS))}")
    spec = VARIANTS[variant]
    num_classes = int(data.source_y.max()) + 1
    classifier = dataclasses.replace(model_spec.classifier, num_classes=num_classes)
    dims = tuple(data.source_x.shape[1:])
    model = build_model(model_spec.vit, model_spec.cnn, classifier, dims, spec.encoder_kinds)
    from .models import init_params

    init_params(model, seed)
    if focal is None:
        counts = np.bincount(data.source_y, minlength=num_classes)
        focal = FocalParams(gamma=2.0, alpha=focal_alpha_from_counts(counts))
    trainer = CdaTrainer(model, plan, opt, seed, focal)

    run_dir = Path(run_dir) if run_dir is not None else None
    flags: list[str] = []

    def checkpoint(stage: int) -> None:
        if run_dir is not None and save_checkpoints:
            save_checkpoint(model, run_dir / "checkpoints" / f"stage{stage}")

    if 1 in spec.stages:
        trainer.run_stage1(data.source_x, data.source_y)
        checkpoint(1)
    else:
        model.take_snapshots()
        flags.append("no_supervised_snapshot")
    if 2 in spec.stages:
        trainer.run_stage2(
            data.source_x, data.source_y, data.target_x, reversed_roles=spec.reversed_roles
        )
        checkpoint(2)
    if 3 in spec.stages:
        trainer.run_stage3(data.target_x, directions=spec.directions)
        checkpoint(3)

    branch = resolve_branch(inference_branch or spec.inference_branch)
    labels, probs = predict(model, data.eval_x, branch=branch)
    metrics = evaluation.compute_metrics(labels, data.eval_y, probs, num_classes)
    eval_ids = data.eval_ids or [str(i) for i in range(len(data.eval_y))]
    report = {
        "variant": variant,
        "seed": seed,
        "inference_branch": branch,
        "flags": flags,
        "counters": dict(trainer.counters),
        "num_eval": int(len(data.eval_y)),
        "metrics": metrics,
        "predictions": {
            "ids": list(eval_ids),
            "true": [int(v) for v in data.eval_y],
            "pred": [int(v) for v in labels],
        },
    }
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "log.jsonl", "w") as fh:
            for record in trainer.log:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        (run_dir / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n"
        )
    return model, report
