"""Residual backbones with importable pre-trained weights.

Parameter names follow the widely published ResNet key layout
(``conv1.weight``, ``layer1.0.bn1.running_mean``, ..., ``fc.weight``), so a
flat key -> array archive (``.npz``, or a ``.pth`` state dict) exported from
any reference ResNet imports by explicit key table.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, HeadDimMismatch, MissingWeights, WeightShapeMismatch
from .stochnorm import DEFAULT_ALPHA, DEFAULT_EPS, DEFAULT_P, StochNorm2d, from_pretrained

logger = logging.getLogger(__name__)

ARCH = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
}
IMAGENET_CLASSES = 1000


@dataclass
class BackboneSpec:
    depth: int = 50
    norm_kind: str = "batch"            # batch | stochastic
    pretrained: str = "imagenet"        # imagenet | random | path to a checkpoint/archive
    weights_path: str | None = None
    input_layout: str = "replicate3"
    base_width: int = 64
    p: float = DEFAULT_P
    alpha: float = DEFAULT_ALPHA
    eps: float = DEFAULT_EPS
    seed: int = 0

    def __post_init__(self):
        if self.depth not in ARCH:
            raise ConfigError(f"unsupported depth {self.depth}; choose from {sorted(ARCH)}")
        if self.norm_kind not in ("batch", "stochastic"):
            raise ConfigError(f"unknown norm kind {self.norm_kind!r}")

    @property
    def pooled_dim(self) -> int:
        kind, _ = ARCH[self.depth]
        return self.base_width * 8 * (4 if kind == "bottleneck" else 1)


def _conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1, bias=False)


def _conv1x1(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 1, stride, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, width, stride=1, downsample=None):
        super().__init__()
        self.conv1 = _conv3x3(cin, width, stride)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = _conv3x3(width, width)
        self.bn2 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride=1, downsample=None):
        super().__init__()
        self.conv1 = _conv1x1(cin, width)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = _conv3x3(width, width, stride)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = _conv1x1(width, width * 4)
        self.bn3 = nn.BatchNorm2d(width * 4)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNet(nn.Module):
    """Feature extractor ``F``: image -> pooled embedding (no classifier)."""

    def __init__(self, depth: int = 50, base_width: int = 64):
        super().__init__()
        kind, layers = ARCH[depth]
        block = BasicBlock if kind == "basic" else Bottleneck
        self.depth = depth
        self.inplanes = base_width
        self.conv1 = nn.Conv2d(3, base_width, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(base_width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = self._make_layer(block, base_width, layers[0])
        self.layer2 = self._make_layer(block, base_width * 2, layers[1], 2)
        self.layer3 = self._make_layer(block, base_width * 4, layers[2], 2)
        self.layer4 = self._make_layer(block, base_width * 8, layers[3], 2)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = base_width * 8 * block.expansion
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def _make_layer(self, block, width, blocks, stride=1):
        downsample = None
        if stride != 1 or self.inplanes != width * block.expansion:
            downsample = nn.Sequential(_conv1x1(self.inplanes, width * block.expansion, stride),
                                       nn.BatchNorm2d(width * block.expansion))
        layers = [block(self.inplanes, width, stride, downsample)]
        self.inplanes = width * block.expansion
        layers += [block(self.inplanes, width) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(self.avgpool(x), 1)


def key_table(depth: int, base_width: int = 64, n_source: int | None = IMAGENET_CLASSES) -> "OrderedDict[str, tuple]":
    """Every key the importer reads for a given depth, with its shape.

    ``fc.*`` is the source classifier ``G``; it is listed only when
    ``n_source`` is given.
    """
    net = ResNet(depth, base_width)
    table = OrderedDict((k, tuple(v.shape)) for k, v in net.state_dict().items()
                        if not k.endswith("num_batches_tracked"))
    if n_source:
        table["fc.weight"] = (n_source, net.out_dim)
        table["fc.bias"] = (n_source,)
    return table


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingWeights(f"weight file not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    obj = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(obj, dict) and "backbone" in obj and isinstance(obj["backbone"], dict):
        obj = {**obj["backbone"], **{f"fc.{k}": v for k, v in obj.get("source_head", {}).items()}}
    elif isinstance(obj, dict) and "state_dict" in obj:
        obj = obj["state_dict"]
    return {k: v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v) for k, v in obj.items()}


def save_archive(path: str | Path, state: Mapping[str, torch.Tensor]) -> None:
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in state.items()
                      if not k.endswith("num_batches_tracked")})


def import_weights(model: ResNet, archive: Mapping[str, np.ndarray], base_width: int = 64) -> None:
    table = key_table(model.depth, base_width, n_source=None)
    missing = [k for k in table if k not in archive]
    if missing:
        raise MissingWeights(f"{len(missing)} keys missing, e.g. {missing[:3]}")
    state = model.state_dict()
    for key, shape in table.items():
        arr = np.asarray(archive[key])
        if tuple(arr.shape) != shape:
            raise WeightShapeMismatch(f"{key}: archive {arr.shape} vs model {shape}")
        state[key] = torch.from_numpy(arr.copy()).to(state[key].dtype)
    model.load_state_dict(state)


def _imagenet_archive(depth: int) -> dict[str, np.ndarray]:
    try:
        import torchvision
        net = getattr(torchvision.models, f"resnet{depth}")(weights="DEFAULT")
    except Exception as exc:  # noqa: BLE001
        raise MissingWeights(f"no ImageNet weights for depth {depth}; set backbone.weights_path ({exc})")
    return {k: v.numpy() for k, v in net.state_dict().items()}


def resolve_archive(spec: BackboneSpec) -> dict[str, np.ndarray] | None:
    if spec.pretrained == "random":
        return None
    if spec.weights_path:
        return load_archive(spec.weights_path)
    if spec.pretrained == "imagenet":
        return _imagenet_archive(spec.depth)
    return load_archive(spec.pretrained)


def swap_norm(model: nn.Module, p: float = DEFAULT_P, alpha: float = DEFAULT_ALPHA,
              eps: float = DEFAULT_EPS, seed: int = 0) -> int:
    """Replace every BatchNorm2d with a StochNorm2d initialized from it."""
    count = 0
    for parent in list(model.modules()):
        for name, child in list(parent.named_children()):
            if isinstance(child, nn.BatchNorm2d):
                state = from_pretrained(child, p, alpha, eps, child.num_features)
                setattr(parent, name, StochNorm2d.from_state(state, layer_id=count, seed=seed))
                count += 1
    return count


def build(spec: BackboneSpec, archive: Mapping[str, np.ndarray] | None = None) -> ResNet:
    """Feature extractor for ``spec`` with imported weights and the chosen norm."""
    torch.manual_seed(spec.seed)
    model = ResNet(spec.depth, spec.base_width)
    if archive is None:
        archive = resolve_archive(spec)
    if archive is not None:
        import_weights(model, archive, spec.base_width)
    if spec.norm_kind == "stochastic":
        swap_norm(model, spec.p, spec.alpha, spec.eps, spec.seed)
    return model


class TransferModel(nn.Module):
    """Backbone ``F`` with target head ``H`` and optional source head ``G``."""

    def __init__(self, backbone: ResNet, target_head: nn.Linear, source_head: nn.Linear | None = None):
        super().__init__()
        self.backbone = backbone
        self.target_head = target_head
        self.source_head = source_head

    def forward(self, x):
        return self.target_head(self.backbone(x))

    def forward_both(self, x):
        z = self.backbone(x)
        src = self.source_head(z) if self.source_head is not None else None
        return self.target_head(z), src

    def head_parameters(self):
        params = list(self.target_head.parameters())
        if self.source_head is not None:
            params += list(self.source_head.parameters())
        return params


def init_target_head(in_dim: int, n_target: int, seed: int = 0) -> nn.Linear:
    head = nn.Linear(in_dim, n_target)
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(in_dim)
    with torch.no_grad():
        head.weight.copy_(torch.rand(head.weight.shape, generator=gen) * 2 * bound - bound)
        head.bias.copy_(torch.rand(head.bias.shape, generator=gen) * 2 * bound - bound)
    return head


def attach_heads(model: ResNet, n_source: int | None, n_target: int, mode: str,
                 archive: Mapping[str, np.ndarray] | None = None, seed: int = 0) -> TransferModel:
    """Attach ``H`` (always, random) and ``G`` (co-tuning modes, from ``fc.*``)."""
    if n_target < 2:
        raise HeadDimMismatch("target head needs at least two classes")
    H = init_target_head(model.out_dim, n_target, seed)
    G = None
    if "cotuning" in mode:
        G = nn.Linear(model.out_dim, n_source)
        if archive is not None and "fc.weight" in archive:
            w, b = np.asarray(archive["fc.weight"]), np.asarray(archive["fc.bias"])
            if w.shape != (n_source, model.out_dim):
                raise HeadDimMismatch(f"source head {w.shape} vs expected {(n_source, model.out_dim)}")
            with torch.no_grad():
                G.weight.copy_(torch.from_numpy(w.copy()))
                G.bias.copy_(torch.from_numpy(b.copy()))
        else:
            logger.warning("co-tuning without pre-trained source head: G is randomly initialized")
    return TransferModel(model, H, G)


@torch.no_grad()
def pooled_embedding(model: nn.Module, inputs) -> np.ndarray:
    """Average-pooled backbone output in eval mode; ``inputs`` is [N,3,H,W] or [3,H,W]."""
    backbone = model.backbone if isinstance(model, TransferModel) else model
    was_training = backbone.training
    backbone.eval()
    x = torch.as_tensor(np.asarray(inputs), dtype=next(backbone.parameters()).dtype)
    single = x.dim() == 3
    if single:
        x = x[None]
    z = backbone(x).cpu().numpy()
    backbone.train(was_training)
    return z[0] if single else z


def n_source_classes(archive: Mapping[str, np.ndarray] | None) -> int | None:
    if archive is None or "fc.weight" not in archive:
        return None
    return int(np.asarray(archive["fc.weight"]).shape[0])
