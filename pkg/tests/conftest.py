import numpy as np
import pytest
import torch

from cda.datagen import DomainSpec, ShiftSpec, generate_phantom
from cda.models import ClassifierConfig, CnnConfig, VitConfig
from cda.trainer import ModelSpec, OptimizerConfig, StagePlan

torch.set_num_threads(1)


def arrays_for(spec: DomainSpec) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for class_id, count in enumerate(spec.n_per_class):
        for index in range(count):
            xs.append(generate_phantom(class_id, spec, index).data)
            ys.append(class_id)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


@pytest.fixture(scope="session")
def tiny_specs() -> tuple[DomainSpec, DomainSpec]:
    source = DomainSpec(
        n_per_class=(6, 6),
        dims=(16, 16, 16),
        domain="source",
        base_seed=11,
        shift=ShiftSpec(noise_sigma=0.02),
    )
    target = DomainSpec(
        n_per_class=(5, 5),
        dims=(16, 16, 16),
        domain="target",
        base_seed=11,
        shift=ShiftSpec(intensity_gain=1.3, smooth_sigma=0.5, noise_sigma=0.05),
    )
    return source, target


@pytest.fixture(scope="session")
def tiny_arrays(tiny_specs):
    source, target = tiny_specs
    sx, sy = arrays_for(source)
    tx, ty = arrays_for(target)
    return {"sx": sx, "sy": sy, "tx": tx, "ty": ty}


@pytest.fixture(scope="session")
def micro_model_spec() -> ModelSpec:
    return ModelSpec(
        vit=VitConfig(patch_size=4, embed_dim=32, depth=1, num_heads=2),
        cnn=CnnConfig(stage_channels=(8, 16), embed_dim=32),
        classifier=ClassifierConfig(hidden_dim=16),
    )


@pytest.fixture()
def fast_plan() -> StagePlan:
    return StagePlan(epochs_stage1=2, epochs_stage2=1, epochs_stage3=1, tau=0.2)


@pytest.fixture()
def default_opt() -> OptimizerConfig:
    return OptimizerConfig()
