"""Acceptance suite: ten numbered criteria covering the full training system.

Each test prints one `[criterion N] PASS/FAIL` line (visible under normal
capture) so the suite doubles as a release checklist. Criteria fall into
three groups: frozen numeric oracles recomputed in-test (1, 2, 7, 9),
structural contracts of the trainer (3, 4), and behavioral properties of
the default benchmark pipeline (5, 6, 8, 10). The benchmark runs use a
desk-scale profile (small encoders, shortened epochs) of the default
recipe so the whole suite stays on a CPU-minutes budget; stage structure,
gates, thresholds, and the benchmark itself are the shipped defaults.

Expected values are either closed forms evaluated with math.log inside
the test or hand-derived constants frozen here; none are copied from the
implementation under test.
"""

import copy
import dataclasses
import json
import math
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from cda import evaluation
from cda.augment import default_weak_policy, weak_augment
from cda.cli import main
from cda.config import DataConfig
from cda.datagen import (
    DomainSpec,
    ShiftSpec,
    derive_seed,
    generate_dataset,
    load_domain_arrays,
    load_manifest,
)
from cda.losses import (
    FocalParams,
    confidence_mask,
    cross_branch_loss,
    discrepancy,
    focal_loss,
    jsd,
    pseudo_label,
    soft_cross_entropy,
    stage1_loss,
    stage2_boundary_loss,
    stage2_consolidation_loss,
)
from cda.models import (
    ClassifierConfig,
    CnnConfig,
    VitConfig,
    build_model,
    classify,
    init_params,
    softmax,
)
from cda.trainer import (
    CdaTrainer,
    ModelSpec,
    OptimizerConfig,
    StagePlan,
    TrainingData,
    _to_batch,
    run_variant,
)

torch.set_num_threads(1)

LN2 = math.log(2.0)

# Desk-scale profile for the benchmark criteria (5, 6): the default stage
# recipe and thresholds on small encoders, epochs cut to fit the budgets.
DESK = SimpleNamespace(
    model=ModelSpec(
        vit=VitConfig(patch_size=8, embed_dim=128, depth=1, num_heads=4),
        cnn=CnnConfig(stage_channels=(8, 16, 32, 64), embed_dim=128),
        classifier=ClassifierConfig(hidden_dim=64, num_classes=3),
    ),
    opt=OptimizerConfig(lr_vit=1e-3),
    focal=FocalParams(gamma=2.0, alpha=(1.0, 1.0, 1.0)),
    plan=StagePlan(epochs_stage1=16, epochs_stage2=2, epochs_stage3=2),
    seeds=(0, 1, 2, 3, 4),
)

# Reports produced while the suite runs; criterion 7 sweeps them all.
GENERATED_REPORTS: list[dict] = []


def _announce(capsys, criterion: int, failures: list[str], detail: str, t0: float,
              budget: float | None = None) -> None:
    elapsed = time.perf_counter() - t0
    if budget is not None and elapsed >= budget:
        failures.append(f"runtime {elapsed:.1f}s exceeded budget {budget:.0f}s")
    status = "PASS" if not failures else "FAIL"
    note = detail if not failures else failures[0]
    with capsys.disabled():
        print(f"[criterion {criterion}] {status} - {note} ({elapsed:.1f}s)")
    assert not failures, "; ".join(failures)


# --- shared fixtures ---


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """The default two-domain benchmark, exactly as `gen-data` ships it."""
    out = tmp_path_factory.mktemp("bench")
    source_spec, target_spec = DataConfig().domain_specs()
    manifest = generate_dataset(source_spec, target_spec, out)
    return SimpleNamespace(
        dir=out,
        manifest=manifest,
        source=load_domain_arrays(manifest, out, "source"),
        target=load_domain_arrays(manifest, out, "target"),
    )


@pytest.fixture(scope="module")
def micro_cv(tmp_path_factory):
    """A small three-class crossval run via the CLI, shared by 8 and 10."""
    work = tmp_path_factory.mktemp("microcv")
    config = {
        "model": {
            "vit": {"patch_size": 4, "embed_dim": 16, "depth": 1, "num_heads": 2},
            "cnn": {"stage_channels": [4, 8], "embed_dim": 16},
            "classifier": {"hidden_dim": 8},
        },
        "plan": {"epochs_stage1": 1, "epochs_stage2": 0, "epochs_stage3": 0},
        "cv": {"folds": 3, "repeats": 2},
        "variant": "s1",
        "data": {
            "dims": [16, 16, 16],
            "source": {"n_per_class": [4, 4, 4]},
            "target": {"n_per_class": [5, 4, 3]},
        },
    }
    config_path = work / "config.json"
    config_path.write_text(json.dumps(config))
    data_dir = work / "bench"
    assert main(["gen-data", "--config", str(config_path), "--out", str(data_dir)]) == 0
    run_dir = work / "cv"
    args = ["crossval", "--config", str(config_path), "--data", str(data_dir)]
    assert main([*args, "--out", str(run_dir)]) == 0
    return SimpleNamespace(work=work, args=args, run_dir=run_dir)


def _tiny_bench(tmp_path, n=2, dims=(16, 16, 16)):
    source = DomainSpec(domain="source", n_per_class=(n, n, n), dims=dims,
                        spacing=(1.0, 1.0, 1.0), base_seed=5,
                        shift=ShiftSpec(noise_sigma=0.02))
    target = DomainSpec(domain="target", n_per_class=(n, n, n), dims=dims,
                        spacing=(1.0, 1.0, 1.0), base_seed=5,
                        shift=ShiftSpec(intensity_gain=1.2, noise_sigma=0.05))
    manifest = generate_dataset(source, target, tmp_path)
    return (
        load_domain_arrays(manifest, tmp_path, "source"),
        load_domain_arrays(manifest, tmp_path, "target"),
    )


def _micro_model(num_classes=2, seed=14):
    """Widest layer is 8; input is a 2x2x2 volume."""
    model = build_model(
        VitConfig(patch_size=1, embed_dim=8, depth=1, num_heads=2),
        CnnConfig(stage_channels=(4,), embed_dim=8),
        ClassifierConfig(hidden_dim=4, num_classes=num_classes),
        input_dims=(2, 2, 2),
    )
    init_params(model, seed)
    return model.double()


# --- criterion 1: loss value oracles ---


def test_criterion_1_loss_oracles(capsys):
    t0 = time.perf_counter()
    failures: list[str] = []

    def check(name, ok):
        if not ok:
            failures.append(name)

    # Focal at gamma = 0 degenerates to plain cross-entropy.
    rng = np.random.default_rng(11)
    raw = rng.uniform(0.05, 1.0, size=(32, 4))
    probs = torch.tensor(raw / raw.sum(axis=1, keepdims=True), dtype=torch.float64)
    labels = torch.tensor(rng.integers(0, 4, size=32))
    fl = focal_loss(probs, labels, FocalParams(gamma=0.0, alpha=None))
    ce = -torch.log(probs[torch.arange(32), labels])
    check("focal gamma=0 vs cross-entropy", bool((fl - ce).abs().max() < 1e-9))

    # Mean absolute difference closed forms; the 0/1 cases are exact and the
    # third is checked against the same arithmetic done in plain Python.
    pair = lambda a, b: (torch.tensor([a], dtype=torch.float64),
                         torch.tensor([b], dtype=torch.float64))
    check("discrepancy identical -> 0",
          discrepancy(*pair((0.3, 0.7), (0.3, 0.7))).item() == 0.0)
    check("discrepancy opposite one-hot -> 1",
          discrepancy(*pair((1.0, 0.0), (0.0, 1.0))).item() == 1.0)
    d3 = discrepancy(*pair((0.6, 0.4), (0.2, 0.8))).item()
    check("discrepancy mixed case vs python arithmetic",
          d3 == (abs(0.6 - 0.2) + abs(0.4 - 0.8)) / 2.0 and abs(d3 - 0.4) < 1e-15)

    # JSD: symmetry, range, and a hand value recomputed with math.log.
    raw = rng.uniform(1e-4, 1.0, size=(64, 3))
    p1 = torch.tensor(raw / raw.sum(axis=1, keepdims=True))
    p2 = torch.roll(p1, 1, dims=0)
    j12, j21 = jsd(p1, p2), jsd(p2, p1)
    check("jsd symmetry", bool((j12 - j21).abs().max() == 0.0))
    extremes = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], dtype=torch.float64)
    all_j = torch.cat([j12, jsd(extremes[:1], extremes[1:2]), jsd(extremes[2:], extremes[2:])])
    check("jsd within [0, ln 2]",
          bool((all_j >= 0).all()) and bool((all_j <= LN2 + 1e-12).all()))

    def kl(p, q):
        return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)

    a, b = (0.9, 0.1), (0.7, 0.3)
    m = [(x + y) / 2 for x, y in zip(a, b)]
    jsd_oracle = 0.5 * kl(a, m) + 0.5 * kl(b, m)
    check("jsd oracle constant", abs(jsd_oracle - 0.03242878581501697) < 1e-12)
    j = jsd(torch.tensor([a], dtype=torch.float64), torch.tensor([b], dtype=torch.float64))
    check("jsd hand value", abs(j.item() - jsd_oracle) < 1e-5)

    # Soft cross-entropy hand value.
    t, p = (0.8, 0.2), (0.6, 0.4)
    sce_oracle = -sum(ti * math.log(pi) for ti, pi in zip(t, p))
    check("soft-CE oracle constant", abs(sce_oracle - 0.5919186453876236) < 1e-12)
    sce = soft_cross_entropy(torch.tensor([p], dtype=torch.float64),
                             torch.tensor([t], dtype=torch.float64))
    check("soft-CE hand value", abs(sce.item() - sce_oracle) < 1e-9)

    _announce(capsys, 1, failures, "focal/discrepancy/JSD/soft-CE oracles", t0, budget=1.0)


# --- criterion 2: finite-difference gradient checks ---


def _fd_check(loss_fn, modules, rng, failures, tag, h=1e-5, rel_tol=1e-4):
    for module in modules:
        for p in module.parameters():
            p.grad = None
    loss_fn().backward()
    checked = 0
    for module in modules:
        for name, param in module.named_parameters():
            if param.grad is None:
                failures.append(f"{tag}: no gradient on {name}")
                return
            flat = param.data.view(-1)
            grad = param.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                idx = int(idx)
                orig = flat[idx].item()
                flat[idx] = orig + h
                plus = loss_fn().item()
                flat[idx] = orig - h
                minus = loss_fn().item()
                flat[idx] = orig
                numeric = (plus - minus) / (2 * h)
                analytic = grad[idx].item()
                scale = max(abs(analytic), abs(numeric))
                if scale < 1e-10:
                    continue
                if abs(analytic - numeric) / scale >= rel_tol:
                    failures.append(
                        f"{tag} {name}[{idx}]: analytic {analytic:.3e} vs fd {numeric:.3e}"
                    )
                    return
                checked += 1
    # At this scale some norm layers see single-element groups and zero out
    # their upstream gradients, so the comparable-entry count stays small.
    if checked < 5:
        failures.append(f"{tag}: only {checked} comparable entries")


def test_criterion_2_gradient_checks(capsys):
    t0 = time.perf_counter()
    failures: list[str] = []
    rng = np.random.default_rng(3)
    data = np.random.default_rng(4)
    target = torch.tensor(data.normal(size=(2, 1, 2, 2, 2)))
    source = torch.tensor(data.normal(size=(2, 1, 2, 2, 2)))
    labels = torch.tensor([0, 1])
    focal = FocalParams(gamma=2.0, alpha=(0.75, 1.25))
    pseudo = torch.tensor([[0.9, 0.1], [0.2, 0.8]], dtype=torch.float64)

    model = _micro_model()
    cases = {
        "supervised vit": (
            lambda: stage1_loss(model.branch_v.encoder, model.branch_v.classifier,
                                source, labels, focal),
            [model.branch_v.encoder, model.branch_v.classifier],
        ),
        "supervised cnn": (
            lambda: stage1_loss(model.branch_c.encoder, model.branch_c.classifier,
                                source, labels, focal),
            [model.branch_c.encoder, model.branch_c.classifier],
        ),
        "boundary": (
            lambda: stage2_boundary_loss(model, target, source, labels, focal),
            [model.branch_v.classifier, model.branch_c.classifier],
        ),
        "consolidation": (
            lambda: stage2_consolidation_loss(model, target),
            [model.branch_c.encoder],
        ),
        "cross v2c": (
            lambda: cross_branch_loss(model, "v2c", target, pseudo, threshold=0.6)[0],
            [model.branch_c.encoder, model.branch_c.classifier],
        ),
        "cross c2v": (
            lambda: cross_branch_loss(model, "c2v", target, pseudo, threshold=0.6)[0],
            [model.branch_v.encoder, model.branch_v.classifier],
        ),
    }
    for tag, (loss_fn, modules) in cases.items():
        _fd_check(loss_fn, modules, rng, failures, tag)
        if failures:
            break

    _announce(capsys, 2, failures, "all stage losses match finite differences", t0,
              budget=30.0)


# --- criterion 3: freeze contracts ---


def _state_clone(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _state_equal(module, ref):
    state = module.state_dict()
    return set(state) == set(ref) and all(torch.equal(state[k], ref[k]) for k in ref)


def test_criterion_3_freeze_contracts(capsys, tmp_path):
    t0 = time.perf_counter()
    failures: list[str] = []
    source, target = _tiny_bench(tmp_path)

    model = build_model(
        VitConfig(patch_size=4, embed_dim=16, depth=1, num_heads=2),
        CnnConfig(stage_channels=(4, 8), embed_dim=16),
        ClassifierConfig(hidden_dim=8, num_classes=3),
        input_dims=(16, 16, 16),
    )
    init_params(model, 0)
    plan = StagePlan(epochs_stage1=1, epochs_stage2=1, epochs_stage3=1,
                     verify_freeze_per_step=True)
    trainer = CdaTrainer(model, plan, OptimizerConfig(), 0, FocalParams(2.0))
    trainer.run_stage1(source.x, source.y)
    snap_v = _state_clone(model.snapshot_v)
    snap_c = _state_clone(model.snapshot_c)

    enc_v = _state_clone(model.branch_v.encoder)
    enc_c = _state_clone(model.branch_c.encoder)
    trainer.run_stage2(source.x, source.y, target.x, phases=("boundary",))
    if not _state_equal(model.branch_v.encoder, enc_v):
        failures.append("vit encoder moved during boundary phase")
    if not _state_equal(model.branch_c.encoder, enc_c):
        failures.append("cnn encoder moved during boundary phase")

    head_v = _state_clone(model.branch_v.classifier)
    head_c = _state_clone(model.branch_c.classifier)
    trainer.run_stage2(source.x, source.y, target.x, phases=("consolidation",))
    if not _state_equal(model.branch_v.classifier, head_v):
        failures.append("vit head moved during consolidation phase")
    if not _state_equal(model.branch_c.classifier, head_c):
        failures.append("cnn head moved during consolidation phase")

    trainer.run_stage3(target.x)
    if not (_state_equal(model.snapshot_v, snap_v) and _state_equal(model.snapshot_c, snap_c)):
        failures.append("a snapshot head changed after stage 1")

    # Teacher detachment: perturbing teacher-branch parameters must leave the
    # student gradient of the co-training loss untouched (same fused labels).
    for direction in ("v2c", "c2v"):
        micro = _micro_model(seed=17)
        strong = torch.tensor(np.random.default_rng(6).normal(size=(3, 1, 2, 2, 2)))
        teacher = micro.branch_v if direction == "v2c" else micro.branch_c
        student = micro.branch_c if direction == "v2c" else micro.branch_v
        with torch.no_grad():
            feats = teacher.encoder(strong)
            fused = softmax(classify(teacher.classifier, feats))

        def student_grads():
            for p in student.parameters():
                p.grad = None
            loss, passed = cross_branch_loss(micro, direction, strong, fused, 0.1)
            assert passed == 3
            loss.backward()
            return torch.cat([p.grad.view(-1) for p in student.parameters()])

        before = student_grads()
        with torch.no_grad():
            for i, p in enumerate(teacher.parameters()):
                p.add_(1e-3 * (1 + i % 3))
        drift = (student_grads() - before).abs().max().item()
        if drift > 1e-8:
            failures.append(f"{direction}: student grads moved {drift:.2e} with teacher")

    _announce(capsys, 3, failures, "encoder/head/snapshot freezes and teacher detachment",
              t0, budget=120.0)


# --- criterion 4: gate and mask behavior ---


def test_criterion_4_gating(capsys, tmp_path):
    t0 = time.perf_counter()
    failures: list[str] = []
    source, target = _tiny_bench(tmp_path)

    def stage3_run(tau):
        model = build_model(
            VitConfig(patch_size=4, embed_dim=16, depth=1, num_heads=2),
            CnnConfig(stage_channels=(4, 8), embed_dim=16),
            ClassifierConfig(hidden_dim=8, num_classes=3),
            input_dims=(16, 16, 16),
        )
        init_params(model, 1)
        plan = StagePlan(epochs_stage1=1, epochs_stage2=0, epochs_stage3=1, tau=tau)
        trainer = CdaTrainer(model, plan, OptimizerConfig(), 1, FocalParams(2.0))
        trainer.run_stage1(source.x, source.y)
        # A fresh stage-3 start with both heads nudged off their snapshots,
        # so every sample carries nonzero snapshot/current divergence.
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            for branch in (model.branch_v, model.branch_c):
                for p in branch.classifier.parameters():
                    p.add_(0.2 * torch.randn(p.shape, generator=gen))
        trainer.run_stage3(target.x)
        record = trainer.log[-1]
        return trainer, record

    trainer, record = stage3_run(tau=1e-9)
    if not (record["gate_rate_v"] == 0.0 and record["gate_rate_c"] == 0.0):
        failures.append(f"tau=1e-9 gate rates {record['gate_rate_v']}, {record['gate_rate_c']}")
    if trainer.counters["v2c_steps"] != 0 or trainer.counters["c2v_steps"] != 0:
        failures.append("tau=1e-9 still stepped a student")

    _, record = stage3_run(tau=LN2 + 1e-9)
    if not (record["gate_rate_v"] == 1.0 and record["gate_rate_c"] == 1.0):
        failures.append(f"tau=ln2+eps gate rates {record['gate_rate_v']}, {record['gate_rate_c']}")

    # The confidence mask is strict: max exactly at the threshold fails.
    at = confidence_mask(torch.tensor([[0.5, 0.5], [0.8, 0.2]]), 0.5)
    if bool(at[0]):
        failures.append("mask passed max == theta")
    if not bool(at[1]):
        failures.append("mask rejected max > theta")
    exact = confidence_mask(torch.tensor([[0.8, 0.2]]), 0.8)
    if bool(exact[0]):
        failures.append("mask passed max == theta at 0.8")

    _announce(capsys, 4, failures, "JSD gate extremes exact, mask strict at equality", t0)


# --- criteria 5 and 6: benchmark dynamics and ablation ordering ---


def _desk_trainer(bench, seed, plan):
    model = build_model(DESK.model.vit, DESK.model.cnn, DESK.model.classifier,
                        tuple(bench.source.x.shape[1:]))
    init_params(model, seed)
    return model, CdaTrainer(model, plan, DESK.opt, seed, DESK.focal)


def test_criterion_5_stage2_dynamics(capsys, bench):
    t0 = time.perf_counter()
    failures: list[str] = []
    passed_seeds = 0
    details = []
    for seed in DESK.seeds:
        _, trainer = _desk_trainer(bench, seed, DESK.plan)
        trainer.run_stage1(bench.source.x, bench.source.y)

        trainer.run_stage2(bench.source.x, bench.source.y, bench.target.x,
                           phases=("boundary",))
        events = [r for r in trainer.log if r.get("stage") == 2]
        b_start = next(r for r in events if r.get("event") == "start")["probe_boundary_dl"]
        b_end = events[-1]["probe_boundary_dl"]

        trainer.run_stage2(bench.source.x, bench.source.y, bench.target.x,
                           phases=("consolidation",))
        events = [r for r in trainer.log if r.get("stage") == 2]
        c_start = next(r for r in reversed(events) if r.get("event") == "start")["probe_adapted_dl"]
        c_end = events[-1]["probe_adapted_dl"]

        ok = b_end > b_start and c_end < c_start
        passed_seeds += ok
        details.append(f"seed {seed}: boundary {b_start:.4f}->{b_end:.4f}, "
                       f"consolidation {c_start:.4f}->{c_end:.4f}{'' if ok else ' (x)'}")
    if passed_seeds < 4:
        failures.append(f"only {passed_seeds}/5 seeds moved both probes; " + "; ".join(details))

    _announce(capsys, 5, failures,
              f"boundary up / consolidation down in {passed_seeds}/5 seeds", t0, budget=300.0)


def test_criterion_6_ablation_ordering(capsys, bench):
    t0 = time.perf_counter()
    failures: list[str] = []
    labeled = bench.target.y >= 0
    data = TrainingData(
        source_x=bench.source.x,
        source_y=bench.source.y,
        target_x=bench.target.x,
        eval_x=bench.target.x[labeled],
        eval_y=bench.target.y[labeled],
        eval_ids=[i for i, ok in zip(bench.target.ids, labeled) if ok],
    )
    scores: dict[str, list[float]] = {}
    for variant in ("s1", "v2c", "c2v", "full"):
        for seed in DESK.seeds:
            _, report = run_variant(variant, data, DESK.model, DESK.plan, DESK.opt,
                                    seed, focal=DESK.focal)
            scores.setdefault(variant, []).append(report["metrics"]["acc"])
            GENERATED_REPORTS.append(report["metrics"])
    means = {v: float(np.mean(a)) for v, a in scores.items()}
    margin = (means["full"] - means["s1"]) * 100
    for rival in ("s1", "v2c", "c2v"):
        if means["full"] < means[rival]:
            failures.append(
                f"full {means['full']:.4f} < {rival} {means[rival]:.4f} "
                f"(all means: {means})"
            )

    _announce(
        capsys, 6, failures,
        "mean target acc " + ", ".join(f"{v} {means[v]:.4f}" for v in scores)
        + f"; full-s1 margin {margin:+.1f} points",
        t0, budget=1800.0,
    )


# --- criterion 7: metric oracles ---


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_7_metric_oracles(capsys):
    t0 = time.perf_counter()
    failures: list[str] = []
    rng = np.random.default_rng(23)

    for trial in range(1000):
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # Half the trials draw from a coarse value set to force ties.
        scores = (rng.integers(0, 4, size=n) / 4.0 if trial % 2
                  else rng.normal(size=n))
        got = evaluation.auc(scores, labels)
        want = _brute_auc(list(scores), list(labels))
        if got != want:
            failures.append(f"auc trial {trial}: {got} != brute {want}")
            break

    # Hand confusion case: TP=8, FN=2, TN=7, FP=3 as a 20-sample set.
    preds = [1] * 8 + [0] * 2 + [0] * 7 + [1] * 3
    labels = [1] * 10 + [0] * 10
    got = evaluation.binary_metrics(evaluation.confusion_matrix(preds, labels, 2))
    for key, want in (("acc", 15 / 20), ("sen", 8 / 10), ("spe", 7 / 10), ("f1", 16 / 21)):
        if got[key] != want:
            failures.append(f"confusion hand case: {key} {got[key]} != {want}")

    # Macro sensitivity must equal the mean of per-class sensitivities on
    # every report this suite produced, plus randomized multi-class reports.
    sweeps = list(GENERATED_REPORTS)
    for _ in range(200):
        k = int(rng.integers(3, 6))
        labels = rng.integers(0, k, size=40)
        labels[:k] = np.arange(k)
        preds = rng.integers(0, k, size=40)
        sweeps.append(evaluation.one_vs_rest_metrics(preds, labels, k))
    checked = 0
    for report in sweeps:
        if "per_class_sen" not in report:
            continue
        recomputed = float(np.mean(report["per_class_sen"]))
        if not math.isclose(report["sen"], recomputed, rel_tol=1e-12, abs_tol=1e-15):
            failures.append(f"macro-SEN identity broke: {report['sen']} vs {recomputed}")
            break
        checked += 1
    if checked < 200:
        failures.append(f"macro-SEN identity swept only {checked} reports")

    _announce(capsys, 7, failures,
              f"AUC == pair counting, hand confusion case, macro-SEN on {checked} reports",
              t0, budget=10.0)


# --- criterion 8: protocol suite ---


def test_criterion_8_protocol(capsys, bench, micro_cv):
    t0 = time.perf_counter()
    failures: list[str] = []

    ids_by_class: dict[int, list[str]] = {}
    for record in bench.manifest.domain_samples("target"):
        ids_by_class.setdefault(record.label, []).append(record.id)
    total = sum(len(v) for v in ids_by_class.values())
    if total != 117 or sorted(len(v) for v in ids_by_class.values()) != [17, 34, 66]:
        failures.append(f"default target manifest is {total} samples, "
                        f"{ {k: len(v) for k, v in ids_by_class.items()} }")

    splits = evaluation.stratified_kfold(ids_by_class, k=5, seed=0)
    seen: set[str] = set()
    for split in splits:
        test = set(split.test_ids)
        if seen & test:
            failures.append(f"fold {split.fold_index} overlaps earlier test ids")
        seen |= test
        if set(split.train_ids) & test:
            failures.append(f"fold {split.fold_index} leaks test ids into train")
    every_id = {i for ids in ids_by_class.values() for i in ids}
    if seen != every_id:
        failures.append("folds do not cover the manifest exactly")
    for label, ids in ids_by_class.items():
        members = set(ids)
        counts = sorted(len(members & set(s.test_ids)) for s in splits)
        if counts[-1] - counts[0] > 1:
            failures.append(f"class {label} spread {counts} breaks the <=1 rule")
        if len(ids) == 17 and counts != [3, 3, 3, 4, 4]:
            failures.append(f"17-member class split {counts} != [3, 3, 3, 4, 4]")

    if evaluation.stratified_kfold(ids_by_class, k=5, seed=0) != splits:
        failures.append("stratified splits are not deterministic")

    # Scheduling independence: a threaded rerun of the same micro crossval
    # must byte-match the sequential report.
    threaded = micro_cv.work / "cv_threaded"
    assert main([*micro_cv.args, "--out", str(threaded), "--jobs", "2"]) == 0
    if ((threaded / "report.json").read_bytes()
            != (micro_cv.run_dir / "report.json").read_bytes()):
        failures.append("jobs=2 report differs from jobs=1 report")

    report = json.loads((micro_cv.run_dir / "report.json").read_text())
    for repeat in report["repeats"]:
        for fold in repeat["folds"]:
            GENERATED_REPORTS.append(fold["metrics"])
        if repeat["pooled"] is not None:
            GENERATED_REPORTS.append(repeat["pooled"])

    _announce(capsys, 8, failures,
              "stratified 5-fold on 117 targets, thread-order-independent reports",
              t0, budget=60.0)


# --- criterion 9: paired t-test oracle ---


def _student_t_tail(t: float, df: int) -> float:
    """Two-sided p via trapezoid quadrature of the t density on [t, inf)."""
    norm = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    u = np.linspace(0.0, 1.0 - 1e-9, 200001)
    x = t + u / (1.0 - u)
    density = norm * (1.0 + x * x / df) ** (-(df + 1) / 2)
    return 2.0 * float(np.trapezoid(density / (1.0 - u) ** 2, u))


def test_criterion_9_paired_t_test(capsys):
    t0 = time.perf_counter()
    failures: list[str] = []

    a = [2.0, 4.0, 6.0, 8.0, 10.0]
    b = [1.0, 2.0, 3.0, 4.0, 5.0]  # differences 1..5
    result = evaluation.paired_t_test(a, b)
    oracle = _student_t_tail(abs(result.statistic), df=4)
    if abs(result.p_value - 0.0132) > 0.0005:
        failures.append(f"p {result.p_value:.6f} outside 0.0132 +/- 0.0005")
    if abs(result.p_value - oracle) > 1e-6:
        failures.append(f"p {result.p_value:.8f} vs quadrature {oracle:.8f}")

    same = evaluation.paired_t_test(b, list(b))
    if same.p_value != 1.0:
        failures.append(f"identical series gave p {same.p_value!r}, not exactly 1.0")

    _announce(capsys, 9, failures,
              f"p={result.p_value:.4f} matches quadrature, identical series p=1.0", t0)


# --- criterion 10: end-to-end reproducibility ---


def test_criterion_10_reproducibility(capsys, micro_cv):
    t0 = time.perf_counter()
    failures: list[str] = []

    rerun = micro_cv.work / "cv_rerun"
    code = main(["crossval", "--config", str(micro_cv.run_dir / "config.json"),
                 "--out", str(rerun)])
    if code != 0:
        failures.append(f"rerun exited {code}")
    elif ((rerun / "report.json").read_bytes()
          != (micro_cv.run_dir / "report.json").read_bytes()):
        failures.append("rerun from the run's own config.json changed report.json")

    _announce(capsys, 10, failures, "crossval rerun is byte-identical", t0)
