"""Expandable-head classifier, generator family, BN statistics and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torchvision

from .errors import ConfigurationError, DimensionError, UnsupportedArchitectureError

CHECKPOINT_FORMAT = "genreplay-checkpoint"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor for a classifier trunk.

    ``trunk`` is ``"desk"`` (small conv net, 4 conv blocks with BN) or one of
    ``"resnet18"`` / ``"resnet34"`` for the full-scale tier.
    """

    trunk: str = "desk"
    in_shape: tuple = (3, 16, 16)
    widths: tuple = (16, 32, 32, 64)

    def to_dict(self):
        return {"trunk": self.trunk, "in_shape": list(self.in_shape), "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d):
        return cls(trunk=d["trunk"], in_shape=tuple(d["in_shape"]), widths=tuple(d["widths"]))


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int = 32
    out_shape: tuple = (3, 16, 16)
    base_width: int = 64
    style: str = "desk"  # "desk" or "dcgan"

    def to_dict(self):
        d = asdict(self)
        d["out_shape"] = list(self.out_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["out_shape"] = tuple(d["out_shape"])
        return cls(**d)


@dataclass
class BNStats:
    mean: torch.Tensor
    variance: torch.Tensor
    channel_count: int = field(init=False)

    def __post_init__(self):
        if self.mean.shape != self.variance.shape or self.mean.dim() != 1:
            raise DimensionError("BN mean and variance must be 1-D vectors of equal length")
        if bool((self.variance < 0).any()):
            raise ValueError("BN variance entries must be non-negative")
        self.channel_count = self.mean.numel()


class DeskTrunk(nn.Module):
    """conv3x3-BN-ReLU blocks, max-pooling after the 2nd and 3rd block, global average pool."""

    def __init__(self, in_channels: int, widths: Sequence[int] = (16, 32, 32, 64)):
        super().__init__()
        layers = []
        c = in_channels
        for i, w in enumerate(widths):
            layers += [
                nn.Conv2d(c, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w, momentum=BN_MOMENTUM),
                nn.ReLU(),
            ]
            if i in (1, 2):
                layers.append(nn.MaxPool2d(2))
            c = w
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.body = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, x):
        return self.body(x)


class ResNetTrunk(nn.Module):
    """torchvision ResNet with the classification layer removed.

    Inputs up to 64 pixels use a 3x3 stem without max-pooling, as is usual for
    CIFAR/Tiny-ImageNet-sized images.
    """

    def __init__(self, depth: int, in_channels: int, image_size: int):
        super().__init__()
        ctor = {18: torchvision.models.resnet18, 34: torchvision.models.resnet34}[depth]
        net = ctor(weights=None)
        if image_size <= 64:
            net.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
            net.maxpool = nn.Identity()
        elif in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        self.out_dim = net.fc.in_features
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x):
        return self.net(x)


def build_trunk(arch: ArchSpec) -> nn.Module:
    c, h, _ = arch.in_shape
    if arch.trunk == "desk":
        return DeskTrunk(c, arch.widths)
    if arch.trunk in ("resnet18", "resnet34"):
        return ResNetTrunk(int(arch.trunk[6:]), c, h)
    raise ConfigurationError(f"unknown trunk {arch.trunk!r}")


def _init_linear(layer: nn.Linear, seed: int):
    g = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        w = torch.rand(layer.weight.shape, generator=g, dtype=torch.float64) * 2 - 1
        b = torch.rand(layer.bias.shape, generator=g, dtype=torch.float64) * 2 - 1
        layer.weight.copy_(w * bound)
        layer.bias.copy_(b * bound)


class IncrementalClassifier(nn.Module):
    """Shared trunk followed by per-task linear heads concatenated at the logit level."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.trunk = build_trunk(arch)
        self.heads = nn.ModuleList()

    @property
    def head_widths(self) -> list:
        return [h.out_features for h in self.heads]

    @property
    def num_classes(self) -> int:
        return sum(self.head_widths)

    def bn_layers(self) -> list:
        return [m for m in self.trunk.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    def features(self, x):
        return self.trunk(x)

    def forward(self, x):
        if tuple(x.shape[1:]) != tuple(self.arch.in_shape):
            raise DimensionError(
                f"expected images of shape {tuple(self.arch.in_shape)}, got {tuple(x.shape[1:])}"
            )
        if not self.heads:
            raise ConfigurationError("classifier has no heads")
        f = self.trunk(x)
        return torch.cat([h(f) for h in self.heads], dim=1)


def new_classifier(arch: ArchSpec, k_first: int, seed: int) -> IncrementalClassifier:
    """Fresh classifier with a single head of width ``k_first``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = IncrementalClassifier(arch)
    return expand_head(model, k_first, init_seed=seed, inplace=True)


def forward(classifier: IncrementalClassifier, images: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    classifier.train(mode == "train")
    return classifier(images)


def expand_head(classifier: IncrementalClassifier, k_new: int, init_seed: int, inplace: bool = False):
    """Append a head of width ``k_new``; by default the input classifier is left untouched."""
    if k_new < 1:
        raise ValueError("k_new must be >= 1")
    model = classifier if inplace else copy.deepcopy(classifier)
    ref = next(model.trunk.parameters())
    head = nn.Linear(model.trunk.out_dim, k_new).to(dtype=ref.dtype, device=ref.device)
    _init_linear(head, init_seed)
    model.heads.append(head)
    return model


def extract_bn_stats(classifier: IncrementalClassifier) -> list:
    layers = classifier.bn_layers()
    if not layers:
        raise UnsupportedArchitectureError("classifier has no batch-normalization layers")
    return [BNStats(m.running_mean.detach().clone(), m.running_var.detach().clone()) for m in layers]


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def parameter_digest(model: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Generator(nn.Module):
    """Noise to image network ending in tanh, so pixels lie in [-1, 1].

    ``desk`` style: linear projection to a (H/4 x W/4) map and two stride-2
    transposed convolutions. ``dcgan`` style: the DCGAN stack of stride-2
    transposed convolutions starting from a 4x4 map.
    """

    def __init__(self, spec: GeneratorSpec, covered_classes: int = 0):
        super().__init__()
        self.spec = spec
        self.noise_dim = spec.noise_dim
        self.out_shape = tuple(spec.out_shape)
        self.covered_classes = covered_classes
        c, h, w = self.out_shape
        nf = spec.base_width
        if spec.style == "desk":
            if h % 4 or w % 4:
                raise ConfigurationError("desk generator needs image sides divisible by 4")
            self.init_hw = (h // 4, w // 4)
            self.project = nn.Sequential(
                nn.Linear(spec.noise_dim, 2 * nf * self.init_hw[0] * self.init_hw[1]),
            )
            self.body = nn.Sequential(
                nn.BatchNorm2d(2 * nf),
                nn.ReLU(),
                nn.ConvTranspose2d(2 * nf, nf, 4, 2, 1, bias=False),
                nn.BatchNorm2d(nf),
                nn.ReLU(),
                nn.ConvTranspose2d(nf, nf // 2, 4, 2, 1, bias=False),
                nn.BatchNorm2d(nf // 2),
                nn.ReLU(),
                nn.Conv2d(nf // 2, c, 3, 1, 1),
                nn.Tanh(),
            )
        elif spec.style == "dcgan":
            if h != w or h < 8 or h & (h - 1):
                raise ConfigurationError("dcgan generator needs square power-of-two images >= 8")
            n_up = int(math.log2(h)) - 2
            mult = 2 ** (n_up - 1)
            self.init_hw = None
            self.project = nn.Identity()
            layers = [
                nn.ConvTranspose2d(spec.noise_dim, nf * mult, 4, 1, 0, bias=False),
                nn.BatchNorm2d(nf * mult),
                nn.ReLU(),
            ]
            for _ in range(n_up - 1):
                layers += [
                    nn.ConvTranspose2d(nf * mult, nf * mult // 2, 4, 2, 1, bias=False),
                    nn.BatchNorm2d(nf * mult // 2),
                    nn.ReLU(),
                ]
                mult //= 2
            layers += [nn.ConvTranspose2d(nf * mult, c, 4, 2, 1, bias=False), nn.Tanh()]
            self.body = nn.Sequential(*layers)
        else:
            raise ConfigurationError(f"unknown generator style {spec.style!r}")

    def forward(self, z):
        if z.dim() != 2 or z.shape[1] != self.noise_dim:
            raise DimensionError(f"noise must have shape (b, {self.noise_dim}), got {tuple(z.shape)}")
        x = self.project(z)
        if self.init_hw is not None:
            x = x.view(z.shape[0], -1, *self.init_hw)
        else:
            x = x.view(z.shape[0], -1, 1, 1)
        return self.body(x)


def new_generator(spec: GeneratorSpec, covered_classes: int, seed: int) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return Generator(spec, covered_classes)


def sample_noise(generator: Generator, n: int, rng: torch.Generator) -> torch.Tensor:
    ref = next(generator.parameters())
    z = torch.randn(n, generator.noise_dim, generator=rng, dtype=torch.float32)
    return z.to(dtype=ref.dtype, device=ref.device)


def generate(generator: Generator, noise: torch.Tensor) -> torch.Tensor:
    """Images for a noise batch, with the generator's BN in inference mode."""
    if noise.dim() != 2 or noise.shape[1] != generator.noise_dim:
        raise DimensionError(f"noise width must be {generator.noise_dim}, got shape {tuple(noise.shape)}")
    was_training = generator.training
    generator.eval()
    try:
        return generator(noise)
    finally:
        generator.train(was_training)


# -- checkpoints -------------------------------------------------------------

def save_classifier(classifier: IncrementalClassifier, path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "classifier",
        "arch": classifier.arch.to_dict(),
        "head_widths": classifier.head_widths,
        "state_dict": classifier.state_dict(),
        "bn_stats": [{"mean": s.mean, "variance": s.variance} for s in extract_bn_stats(classifier)],
        "config_hash": config_hash,
    }
    _atomic_torch_save(payload, path)
    return path


def save_generator(generator: Generator, path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "generator",
        "spec": generator.spec.to_dict(),
        "covered_classes": generator.covered_classes,
        "state_dict": generator.state_dict(),
        "config_hash": config_hash,
    }
    _atomic_torch_save(payload, path)
    return path


def _atomic_torch_save(payload, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path):
    """Rebuild the model stored at ``path`` (classifier or generator)."""
    payload = read_checkpoint(path)
    sd = payload["state_dict"]
    dtype = next(iter(sd.values())).dtype
    if payload["kind"] == "classifier":
        model = IncrementalClassifier(ArchSpec.from_dict(payload["arch"]))
        for k in payload["head_widths"]:
            model.heads.append(nn.Linear(model.trunk.out_dim, k))
    elif payload["kind"] == "generator":
        model = Generator(GeneratorSpec.from_dict(payload["spec"]), payload["covered_classes"])
    else:
        raise ConfigurationError(f"unknown checkpoint kind {payload['kind']!r}")
    model.to(dtype=dtype)
    model.load_state_dict(sd)
    model.eval()
    return model


def describe_checkpoint(path) -> dict:
    payload = read_checkpoint(path)
    info = {k: payload[k] for k in ("format", "version", "kind", "config_hash")}
    if payload["kind"] == "classifier":
        info["arch"] = payload["arch"]
        info["head_widths"] = payload["head_widths"]
        info["bn_layers"] = len(payload["bn_stats"])
    else:
        info["spec"] = payload["spec"]
        info["covered_classes"] = payload["covered_classes"]
    info["parameters"] = int(sum(t.numel() for t in payload["state_dict"].values() if t.is_floating_point()))
    return info
