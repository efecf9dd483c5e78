"""Dual-branch model: a 3-D ViT encoder and a 3-D residual CNN encoder
projecting into a shared feature width, each with its own classifier head.

Classifier heads are interchangeable across encoders (same input width),
which the adaptation stages exploit by plugging one branch's classifier
onto the other branch's features. Normalization is LayerNorm (ViT) and
GroupNorm (CNN): neither keeps running statistics, so a frozen module is
bit-identical no matter how many forward passes it sees.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import re
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datagen import derive_seed
from .errors import ConfigError, DataFormatError


@dataclasses.dataclass(frozen=True)
class VitConfig:
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.embed_dim < 1 or self.depth < 1 or self.num_heads < 1:
            raise ConfigError("vit config values must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )


@dataclasses.dataclass(frozen=True)
class CnnConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    embed_dim: int = 128

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage_channels must be non-empty positive ints")
        if self.blocks_per_stage < 1 or self.embed_dim < 1:
            raise ConfigError("cnn config values must be positive")


@dataclasses.dataclass(frozen=True)
class ClassifierConfig:
    hidden_dim: int = 64
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Probabilities over the last axis, stabilized by max subtraction."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups != 0:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim))
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VitEncoder(nn.Module):
    """Patchify, add learned positions, run transformer blocks, mean-pool tokens."""

    def __init__(self, config: VitConfig, input_dims: tuple[int, int, int]) -> None:
        super().__init__()
        p = config.patch_size
        if any(n % p != 0 for n in input_dims):
            raise ConfigError(f"input dims {tuple(input_dims)} not divisible by patch size {p}")
        self.config = config
        self.input_dims = tuple(input_dims)
        self.grid = tuple(n // p for n in input_dims)
        self.num_tokens = int(np.prod(self.grid))
        self.patch_embed = nn.Conv3d(1, config.embed_dim, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_tokens, config.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.out_dim = config.embed_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens).mean(dim=1)


class ResidualBlock3d(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = _group_norm(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _group_norm(channels)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + x)


class CnnEncoder(nn.Module):
    """Stride-2 stages of residual blocks, global average pool, linear projection."""

    def __init__(self, config: CnnConfig, input_dims: tuple[int, int, int]) -> None:
        super().__init__()
        if any(n < 2 ** len(config.stage_channels) for n in input_dims):
            raise ConfigError(
                f"input dims {tuple(input_dims)} too small for "
                f"{len(config.stage_channels)} stride-2 stages"
            )
        self.config = config
        self.input_dims = tuple(input_dims)
        first = config.stage_channels[0]
        self.stem = nn.Sequential(nn.Conv3d(1, first, 3, padding=1), _group_norm(first), nn.ReLU())
        stages = []
        in_ch = first
        for out_ch in config.stage_channels:
            layers: list[nn.Module] = [
                nn.Conv3d(in_ch, out_ch, 3, stride=2, padding=1),
                _group_norm(out_ch),
                nn.ReLU(),
            ]
            layers += [ResidualBlock3d(out_ch) for _ in range(config.blocks_per_stage)]
            stages.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.proj = nn.Linear(in_ch, config.embed_dim)
        self.out_dim = config.embed_dim

    def feature_grid(self) -> tuple[int, int, int]:
        """Spatial dims right before pooling (each stage halves, rounding up)."""
        dims = self.input_dims
        for _ in self.config.stage_channels:
            dims = tuple(-(-n // 2) for n in dims)
        return dims

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stages(self.stem(x))
        return self.proj(self.pool(x).flatten(1))


class ClassifierHead(nn.Module):
    """Two fully connected layers mapping shared features to class logits."""

    def __init__(self, config: ClassifierConfig, in_dim: int) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.num_classes = config.num_classes
        self.fc1 = nn.Linear(in_dim, config.hidden_dim)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(config.hidden_dim, config.num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(features)))


def classify(head: ClassifierHead, features: torch.Tensor) -> torch.Tensor:
    """Apply any head to any encoder's features; widths must agree."""
    if features.shape[-1] != head.in_dim:
        raise ConfigError(
            f"feature width {features.shape[-1]} does not match classifier input {head.in_dim}"
        )
    return head(features)


class Branch(nn.Module):
    def __init__(self, encoder: nn.Module, classifier: ClassifierHead, kind: str) -> None:
        super().__init__()
        self.encoder = encoder
        self.classifier = classifier
        self.kind = kind

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return classify(self.classifier, self.encoder(x))


class DualBranchModel(nn.Module):
    """Two encoder+classifier branches over a shared feature width.

    branch_v is the global-context branch, branch_c the local-texture
    branch; either can be built from either encoder family. Snapshot
    heads (fixed copies of the classifiers) are attached after the
    supervised stage and never trained.
    """

    def __init__(self, branch_v: Branch, branch_c: Branch) -> None:
        super().__init__()
        if branch_v.encoder.out_dim != branch_c.encoder.out_dim:
            raise ConfigError("branches must share the feature width")
        if branch_v.classifier.num_classes != branch_c.classifier.num_classes:
            raise ConfigError("branches must share the class count")
        self.branch_v = branch_v
        self.branch_c = branch_c
        self.snapshot_v: ClassifierHead | None = None
        self.snapshot_c: ClassifierHead | None = None

    @property
    def num_classes(self) -> int:
        return self.branch_v.classifier.num_classes

    def components(self) -> dict[str, nn.Module]:
        parts = {
            "encoder_v": self.branch_v.encoder,
            "classifier_v": self.branch_v.classifier,
            "encoder_c": self.branch_c.encoder,
            "classifier_c": self.branch_c.classifier,
        }
        if self.snapshot_v is not None:
            parts["snapshot_v"] = self.snapshot_v
            parts["snapshot_c"] = self.snapshot_c
        return parts

    def take_snapshots(self) -> None:
        """Freeze copies of both classifier heads as pseudo-label anchors."""
        self.snapshot_v = copy.deepcopy(self.branch_v.classifier)
        self.snapshot_c = copy.deepcopy(self.branch_c.classifier)
        for head in (self.snapshot_v, self.snapshot_c):
            head.requires_grad_(False)
            head.eval()


def build_encoder(kind: str, vit: VitConfig, cnn: CnnConfig, dims: tuple[int, int, int]) -> nn.Module:
    if kind == "vit":
        return VitEncoder(vit, dims)
    if kind == "cnn":
        return CnnEncoder(cnn, dims)
    raise ConfigError(f"unknown encoder kind {kind!r}")


def build_model(
    vit: VitConfig,
    cnn: CnnConfig,
    classifier: ClassifierConfig,
    input_dims: tuple[int, int, int],
    encoder_kinds: tuple[str, str] = ("vit", "cnn"),
) -> DualBranchModel:
    if vit.embed_dim != cnn.embed_dim:
        raise ConfigError(
            f"encoders must project to one width, got {vit.embed_dim} and {cnn.embed_dim}"
        )
    branches = []
    for kind in encoder_kinds:
        encoder = build_encoder(kind, vit, cnn, tuple(input_dims))
        branches.append(Branch(encoder, ClassifierHead(classifier, encoder.out_dim), kind))
    return DualBranchModel(branches[0], branches[1])


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv3d)):
            fan_in = sub.weight.shape[1:].numel()
            sub.weight.data.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
            if sub.bias is not None:
                sub.bias.data.normal_(0.0, 0.01, generator=gen)
        elif isinstance(sub, (nn.LayerNorm, nn.GroupNorm)):
            sub.weight.data.normal_(1.0, 0.01, generator=gen)
            sub.bias.data.normal_(0.0, 0.01, generator=gen)
    if isinstance(module, VitEncoder):
        module.pos_embed.data.normal_(0.0, 0.02, generator=gen)
        # Downscale each residual branch's output layer so the stream stays
        # near-identity at depth; plain SGD fails to escape bad transformer
        # inits without this.
        scale = 1.0 / math.sqrt(2 * len(module.blocks))
        for block in module.blocks:
            block.attn.proj.weight.data.mul_(scale)
            block.mlp[-1].weight.data.mul_(scale)


def init_params(model: DualBranchModel, seed: int) -> None:
    """Deterministically initialize every parameter from the named seed.

    Each component gets its own derived stream, so sibling classifiers
    start different (their initial outputs must disagree) and adding or
    removing one component never shifts another's draw.
    """
    for name, component in model.components().items():
        gen = torch.Generator()
        gen.manual_seed(derive_seed(seed, "init", name))
        _init_module(component, gen)


def fingerprint(module: nn.Module) -> str:
    """sha256 over all named parameters and buffers; order-stable."""
    h = hashlib.sha256()
    entries = sorted(list(module.named_parameters()) + list(module.named_buffers()))
    for name, tensor in entries:
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


def save_checkpoint(module: nn.Module, out_dir: str | Path) -> None:
    """One raw little-endian file per tensor plus a JSON index with sha256 digests."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, tensor) in enumerate(module.state_dict().items()):
        arr = tensor.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise DataFormatError(f"unsupported checkpoint dtype {dtype} for {name}")
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        filename = f"{i:04d}_{re.sub(r'[^A-Za-z0-9_.-]', '_', name)}.bin"
        (out_dir / filename).write_bytes(payload)
        entries.append(
            {
                "name": name,
                "file": filename,
                "shape": list(arr.shape),
                "dtype": dtype,
                "sha256": hashlib.sha256(payload).hexdigest(),
            }
        )
    index = {"format_version": 1, "tensors": entries}
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_checkpoint(in_dir: str | Path) -> dict[str, torch.Tensor]:
    in_dir = Path(in_dir)
    index_path = in_dir / "index.json"
    if not index_path.exists():
        raise DataFormatError(f"{in_dir}: checkpoint index not found")
    try:
        index = json.loads(index_path.read_text())
        entries = index["tensors"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataFormatError(f"{index_path}: malformed checkpoint index: {exc}") from exc
    state: dict[str, torch.Tensor] = {}
    for entry in entries:
        payload = (in_dir / entry["file"]).read_bytes()
        digest = hashlib.sha256(payload).hexdigest()
        if digest != entry["sha256"]:
            raise DataFormatError(
                f"{in_dir}/{entry['file']}: checksum mismatch (tensor {entry['name']})"
            )
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataFormatError(f"unsupported checkpoint dtype {entry['dtype']}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
    return state
