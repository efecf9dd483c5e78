"""Synthetic two-domain volumetric classification benchmark.

Each sample is a smooth head-like phantom: a large ellipsoid with two
fixed lateral structures and a bright interior core whose radius shrinks
monotonically with the class index. Domain shift is layered on top as a
fixed chain of corruptions applied in this order:

    gain -> gamma -> smoothing -> multiplicative bias field -> additive noise

A knob set to zero disables that corruption, so an all-zero shift spec
is a no-op and the two domains differ only in sample count.

Every sample is a pure function of (base_seed, domain, class_id,
sample_index): per-sample seeds are derived by hashing those fields, so
datasets regenerate bit-identically regardless of generation order or
process.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataFormatError
from .volume import VOLUME_SUFFIX, Volume, load_volume, save_volume

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1

# Geometry of the phantom in normalized [-1, 1] coordinates.
_HEAD_SEMI_AXES = (0.88, 0.82, 0.78)
_HEAD_INTENSITY = 0.55
_LOBE_INTENSITY = 0.25
_CORE_BASE_RADIUS = 0.50
_CORE_INTENSITY = 0.75
_CORE_SHRINK_SPAN = 0.50  # class K-1 core radius = base * (1 - span)
_TEXTURE_AMPLITUDE = 0.04


def derive_seed(*parts: object) -> int:
    """Map a tuple of identifying values to a 63-bit integer seed.

    Uses sha256 of the string rendering, so the mapping is stable across
    processes and platforms (unlike the builtin salted hash).
    """
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclasses.dataclass(frozen=True)
class ShiftSpec:
    """Domain-shift knobs; zero disables the corresponding corruption."""

    intensity_gain: float = 0.0
    intensity_gamma: float = 0.0
    smooth_sigma: float = 0.0
    bias_field_amp: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if value < 0:
                raise ValueError(f"shift knob {field.name} must be >= 0, got {value}")

    def is_identity(self) -> bool:
        return all(getattr(self, f.name) == 0 for f in dataclasses.fields(self))


@dataclasses.dataclass(frozen=True)
class DomainSpec:
    """One acquisition site: per-class sample counts plus its shift profile."""

    n_per_class: tuple[int, ...]
    shift: ShiftSpec = ShiftSpec()
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    domain: str = "source"
    base_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_per_class", tuple(int(n) for n in self.n_per_class))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.n_per_class) < 2:
            raise ValueError("need at least two classes")
        if any(n < 1 for n in self.n_per_class):
            raise ValueError(f"every class needs at least one sample, got {self.n_per_class}")
        if len(self.dims) != 3 or any(n <= 0 for n in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def num_classes(self) -> int:
        return len(self.n_per_class)

    @property
    def total(self) -> int:
        return sum(self.n_per_class)


def sample_seed(spec: DomainSpec, class_id: int, sample_index: int) -> int:
    return derive_seed(spec.base_seed, spec.domain, class_id, sample_index)


def _normalized_grid(dims: tuple[int, int, int]) -> list[np.ndarray]:
    axes = [np.linspace(-1.0, 1.0, n, dtype=np.float64) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(
    grid: Sequence[np.ndarray],
    center: Sequence[float],
    semi_axes: Sequence[float],
    edge: float = 0.12,
) -> np.ndarray:
    """Soft indicator: 1 well inside, linear falloff across the boundary shell."""
    rho = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, semi_axes))
    return np.clip((1.0 - rho) / edge, 0.0, 1.0)


def _smooth_unit_field(dims: tuple[int, int, int], rng: np.random.Generator, nodes: int = 4) -> np.ndarray:
    """Low-frequency random field, trilinearly upsampled and scaled to max |f| = 1."""
    grid = rng.standard_normal((nodes, nodes, nodes))
    coords = np.meshgrid(
        *[np.linspace(0.0, nodes - 1.0, n) for n in dims],
        indexing="ij",
    )
    field = ndimage.map_coordinates(grid, np.stack(coords), order=1, mode="nearest")
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def core_radius(class_id: int, num_classes: int) -> float:
    """Interior core radius; strictly decreasing in class_id."""
    frac = class_id / max(num_classes - 1, 1)
    return _CORE_BASE_RADIUS * (1.0 - _CORE_SHRINK_SPAN * frac)


def generate_phantom(
    class_id: int,
    spec: DomainSpec,
    sample_index: int,
    *,
    noise_seed: int | None = None,
) -> Volume:
    """Deterministically synthesize one phantom with the domain's shift applied.

    noise_seed overrides the derived seed of the additive-noise stream only;
    structure and bias streams are untouched. Used to study noise in isolation.
    """
    if not 0 <= class_id < spec.num_classes:
        raise ValueError(f"class_id {class_id} out of range for {spec.num_classes} classes")
    if sample_index < 0:
        raise ValueError(f"sample_index must be >= 0, got {sample_index}")

    seed = sample_seed(spec, class_id, sample_index)
    structure_rng = np.random.default_rng(derive_seed(seed, "structure"))
    bias_rng = np.random.default_rng(derive_seed(seed, "bias"))
    noise_rng = np.random.default_rng(
        derive_seed(seed, "noise") if noise_seed is None else noise_seed
    )

    grid = _normalized_grid(spec.dims)
    vol = _HEAD_INTENSITY * _ellipsoid(grid, (0.0, 0.0, 0.0), _HEAD_SEMI_AXES)
    vol += _LOBE_INTENSITY * _ellipsoid(grid, (0.38, -0.30, 0.10), (0.26, 0.22, 0.24))
    vol += _LOBE_INTENSITY * _ellipsoid(grid, (-0.38, 0.30, -0.10), (0.26, 0.22, 0.24))

    center = structure_rng.uniform(-0.06, 0.06, size=3)
    radius = core_radius(class_id, spec.num_classes) * (1.0 + structure_rng.uniform(-0.06, 0.06))
    axis_jitter = 1.0 + structure_rng.uniform(-0.08, 0.08, size=3)
    vol += _CORE_INTENSITY * _ellipsoid(grid, center, radius * axis_jitter)

    texture = _smooth_unit_field(spec.dims, structure_rng)
    vol += _TEXTURE_AMPLITUDE * texture * _ellipsoid(grid, (0.0, 0.0, 0.0), _HEAD_SEMI_AXES)

    shift = spec.shift
    if shift.intensity_gain > 0:
        vol = vol * shift.intensity_gain
    if shift.intensity_gamma > 0:
        peak = vol.max()
        if peak > 0:
            vol = peak * (vol / peak) ** shift.intensity_gamma
    if shift.smooth_sigma > 0:
        vol = ndimage.gaussian_filter(vol, sigma=shift.smooth_sigma, mode="nearest")
    if shift.bias_field_amp > 0:
        vol = vol * (1.0 + shift.bias_field_amp * _smooth_unit_field(spec.dims, bias_rng))
    if shift.noise_sigma > 0:
        vol = vol + noise_rng.normal(0.0, shift.noise_sigma, size=spec.dims)

    return Volume(data=vol.astype(np.float32), spacing=spec.spacing)


@dataclasses.dataclass(frozen=True)
class SampleRecord:
    id: str
    path: str
    domain: str
    label: int | None
    seed: int


@dataclasses.dataclass
class DatasetManifest:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    samples: list[SampleRecord]
    format_version: int = MANIFEST_FORMAT_VERSION

    def domain_samples(self, domain: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.domain == domain]

    @property
    def num_classes(self) -> int:
        labels = {s.label for s in self.samples if s.label is not None}
        return max(labels) + 1 if labels else 0

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "samples": [dataclasses.asdict(s) for s in self.samples],
        }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: manifest not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    try:
        samples = [
            SampleRecord(
                id=str(s["id"]),
                path=str(s["path"]),
                domain=str(s["domain"]),
                label=None if s["label"] is None else int(s["label"]),
                seed=int(s["seed"]),
            )
            for s in raw["samples"]
        ]
        manifest = DatasetManifest(
            dims=tuple(int(n) for n in raw["dims"]),
            spacing=tuple(float(s) for s in raw["spacing"]),
            samples=samples,
            format_version=int(raw["format_version"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: manifest missing or malformed field: {exc}") from exc
    if manifest.format_version != MANIFEST_FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported manifest format_version {manifest.format_version}"
        )
    ids = [s.id for s in manifest.samples]
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate sample ids in manifest")
    return manifest


def generate_dataset(
    source: DomainSpec,
    target: DomainSpec,
    out_dir: str | Path,
    *,
    hide_target_labels: bool = False,
) -> DatasetManifest:
    """Write both domains under out_dir and return the manifest.

    Target labels are kept in the manifest by default; they are ground
    truth for evaluation, never shown to the trainer. Regenerating into
    the same directory is byte-identical.
    """
    if source.dims != target.dims or source.spacing != target.spacing:
        raise ValueError("source and target must share dims and spacing")
    if source.num_classes != target.num_classes:
        raise ValueError("source and target must share the class set")

    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)

    samples: list[SampleRecord] = []
    for spec in (source, target):
        for class_id, count in enumerate(spec.n_per_class):
            for index in range(count):
                sample_id = f"{spec.domain}-c{class_id}-{index:04d}"
                rel_path = f"volumes/{sample_id}{VOLUME_SUFFIX}"
                volume = generate_phantom(class_id, spec, index)
                save_volume(volume, out_dir / rel_path)
                label = None if (hide_target_labels and spec is target) else class_id
                samples.append(
                    SampleRecord(
                        id=sample_id,
                        path=rel_path,
                        domain=spec.domain,
                        label=label,
                        seed=sample_seed(spec, class_id, index),
                    )
                )

    manifest = DatasetManifest(dims=spec.dims, spacing=spec.spacing, samples=samples)
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


@dataclasses.dataclass
class DomainArrays:
    """All volumes of one domain stacked into memory, manifest order."""

    x: np.ndarray  # (N, d0, d1, d2) float32
    y: np.ndarray  # (N,) int64; -1 where the manifest has no label
    ids: list[str]


def load_domain_arrays(manifest: DatasetManifest, root: str | Path, domain: str) -> DomainArrays:
    root = Path(root)
    records = manifest.domain_samples(domain)
    if not records:
        raise DataFormatError(f"manifest has no samples for domain {domain!r}")
    x = np.empty((len(records), *manifest.dims), dtype=np.float32)
    y = np.full(len(records), -1, dtype=np.int64)
    for i, rec in enumerate(records):
        x[i] = load_volume(root / rec.path, manifest.dims, manifest.spacing).data
        if rec.label is not None:
            y[i] = rec.label
    return DomainArrays(x=x, y=y, ids=[rec.id for rec in records])
