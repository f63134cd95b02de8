"""Classifier architectures, logit forward passes, input gradients, and
portable checkpoints.

Checkpoints are directories: ``spec.json`` + one DFM1 tensor per parameter
under ``params/`` + ``digest.txt`` (SHA-256 over architecture and weights).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .container import read_tensor, write_tensor

ARCHS = ("lenet", "vgg8", "vgg16", "vgg19", "resnet18", "resnet50", "linear", "tinyconv")


class ModelError(Exception):
    """Unknown architecture, shape mismatch, or bad loss spec."""


class CheckpointError(Exception):
    """Corrupt checkpoint directory, digest mismatch, or spec mismatch."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple[int, ...]  # (C, H, W) for images, (d,) for vectors
    num_classes: int

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ModelError(f"unknown arch id: {self.arch!r} (expected one of {ARCHS})")
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


class LeNet(nn.Module):
    def __init__(self, in_channels: int, height: int, width: int, num_classes: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 6, kernel_size=5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(6, 16, kernel_size=5),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        with torch.no_grad():
            flat = self.features(torch.zeros(1, in_channels, height, width)).numel()
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, 120),
            nn.ReLU(),
            nn.Linear(120, 84),
            nn.ReLU(),
            nn.Linear(84, num_classes),
        )

    def forward(self, x):
        return self.classifier(self.features(x))


class VGG(nn.Module):
    """VGG-style stack; ``cfg`` lists channel counts with "M" for max pool.

    vgg8 is the variant with exactly one convolution per pooling stage.
    """

    CFGS = {
        "vgg8": [64, "M", 128, "M", 256, "M", 512, "M", 512, "M"],
        "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                  512, 512, 512, "M", 512, 512, 512, "M"],
        "vgg19": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                  512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
    }

    def __init__(self, cfg_name: str, in_channels: int, num_classes: int):
        super().__init__()
        layers: list[nn.Module] = []
        c = in_channels
        for item in self.CFGS[cfg_name]:
            if item == "M":
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            else:
                layers += [
                    nn.Conv2d(c, item, kernel_size=3, padding=1),
                    nn.BatchNorm2d(item),
                    nn.ReLU(),
                ]
                c = item
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(c, num_classes)

    def forward(self, x):
        x = self.pool(self.features(x))
        return self.classifier(torch.flatten(x, 1))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        out_planes = planes * self.expansion
        self.conv1 = nn.Conv2d(in_planes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_planes, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_planes),
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = torch.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return torch.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    """CIFAR-style ResNet: 3x3 stem, no stem pooling."""

    def __init__(self, block, layers: list[int], in_channels: int, num_classes: int):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(in_channels, 64, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._make_layer(block, 64, layers[0], 1)
        self.layer2 = self._make_layer(block, 128, layers[1], 2)
        self.layer3 = self._make_layer(block, 256, layers[2], 2)
        self.layer4 = self._make_layer(block, 512, layers[3], 2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(512 * block.expansion, num_classes)

    def _make_layer(self, block, planes, count, stride):
        blocks = []
        for s in [stride] + [1] * (count - 1):
            blocks.append(block(self.in_planes, planes, s))
            self.in_planes = planes * block.expansion
        return nn.Sequential(*blocks)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return self.fc(torch.flatten(self.pool(out), 1))


class TinyConv(nn.Module):
    """Small conv net (<1e4 parameters) used for gradient verification."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 4, 3, padding=1),
            nn.Tanh(),
            nn.MaxPool2d(2),
            nn.Conv2d(4, 8, 3, padding=1),
            nn.Tanh(),
            nn.AdaptiveAvgPool2d(2),
            nn.Flatten(),
            nn.Linear(32, num_classes),
        )

    def forward(self, x):
        return self.net(x)


def _instantiate(spec: ModelSpec) -> nn.Module:
    if spec.arch == "linear":
        d = int(np.prod(spec.input_shape))
        return nn.Sequential(nn.Flatten(), nn.Linear(d, spec.num_classes))
    if len(spec.input_shape) != 3:
        raise ModelError(f"arch {spec.arch!r} needs a (C,H,W) input shape, got {spec.input_shape}")
    c, h, w = spec.input_shape
    if spec.arch == "lenet":
        return LeNet(c, h, w, spec.num_classes)
    if spec.arch in VGG.CFGS:
        return VGG(spec.arch, c, spec.num_classes)
    if spec.arch == "resnet18":
        return ResNet(BasicBlock, [2, 2, 2, 2], c, spec.num_classes)
    if spec.arch == "resnet50":
        return ResNet(Bottleneck, [3, 4, 6, 3], c, spec.num_classes)
    if spec.arch == "tinyconv":
        return TinyConv(c, spec.num_classes)
    raise ModelError(f"unknown arch id: {spec.arch!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: ModelSpec
    model: nn.Module
    provenance: dict = field(default_factory=dict)

    def digest(self) -> str:
        """SHA-256 over architecture spec and all parameter/buffer payloads."""
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        state = self.model.state_dict()
        for name in sorted(state):
            tensor = state[name].detach().cpu()
            arr = tensor.numpy()
            if arr.dtype.kind == "f":
                arr = np.ascontiguousarray(arr, dtype="<f4")
            else:
                arr = np.ascontiguousarray(arr, dtype="<i8")
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def param_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())


def build_model(spec: ModelSpec, init_seed: int, provenance: dict | None = None) -> Checkpoint:
    """Construct a freshly initialized model; identical seed, identical weights."""
    torch.manual_seed(init_seed)
    model = _instantiate(spec)
    model.eval()
    prov = {"chain_index": 0, "robust": False, "train_seed": int(init_seed)}
    if provenance:
        prov.update(provenance)
    return Checkpoint(spec=spec, model=model, provenance=prov)


def _as_input_tensor(ckpt: Checkpoint, x: np.ndarray | torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float32)
    if tuple(t.shape[1:]) != ckpt.spec.input_shape:
        raise ModelError(
            f"input shape {tuple(t.shape[1:])} does not match model input "
            f"{ckpt.spec.input_shape}"
        )
    return t


def forward_logits(
    ckpt: Checkpoint, x: np.ndarray | torch.Tensor, batch_size: int = 512
) -> np.ndarray:
    """Pre-softmax logits, shape (N, K). Deterministic: model runs in eval mode."""
    t = _as_input_tensor(ckpt, x)
    ckpt.model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, t.shape[0], batch_size):
            outs.append(ckpt.model(t[i : i + batch_size]))
    return torch.cat(outs).numpy()


def input_gradient(
    ckpt: Checkpoint,
    x: np.ndarray | torch.Tensor,
    loss: tuple[str, np.ndarray | torch.Tensor],
    float64: bool = False,
) -> np.ndarray:
    """Gradient of a summed per-sample loss with respect to the input batch.

    ``loss`` is ("logit_l2", target_logits) for the squared Euclidean logit
    distance, or ("cross_entropy", labels). Weights are never modified; sum
    reduction keeps per-sample gradients independent of batch size.
    """
    kind, target = loss
    dtype = torch.float64 if float64 else torch.float32
    model = ckpt.model
    if float64:
        import copy

        model = copy.deepcopy(model).double()
    model.eval()

    t = _as_input_tensor(ckpt, x).to(dtype).requires_grad_(True)
    logits = model(t)
    if kind == "logit_l2":
        tgt = torch.as_tensor(target, dtype=dtype)
        if tgt.shape != logits.shape:
            raise ModelError(f"target shape {tuple(tgt.shape)} != logits {tuple(logits.shape)}")
        value = ((logits - tgt) ** 2).sum()
    elif kind == "cross_entropy":
        labels = torch.as_tensor(target, dtype=torch.long)
        if labels.shape[0] != logits.shape[0]:
            raise ModelError("label count does not match batch size")
        value = nn.functional.cross_entropy(logits, labels, reduction="sum")
    else:
        raise ModelError(f"unknown loss kind: {kind!r}")
    (grad,) = torch.autograd.grad(value, t)
    return grad.detach().numpy()


def save_checkpoint(ckpt: Checkpoint, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "params").mkdir(parents=True, exist_ok=True)
    meta = {"spec": ckpt.spec.to_dict(), "provenance": ckpt.provenance}
    with open(out_dir / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, tensor in ckpt.model.state_dict().items():
        write_tensor(out_dir / "params" / f"{name}.dfm", tensor.detach().cpu().numpy())
    (out_dir / "digest.txt").write_text(ckpt.digest() + "\n", encoding="utf-8")
    return out_dir


def load_checkpoint(in_dir: str | Path, expect: ModelSpec | None = None) -> Checkpoint:
    in_dir = Path(in_dir)
    spec_path = in_dir / "spec.json"
    if not spec_path.exists():
        raise CheckpointError(f"missing checkpoint spec: {spec_path}")
    with open(spec_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = ModelSpec(
        arch=meta["spec"]["arch"],
        input_shape=tuple(meta["spec"]["input_shape"]),
        num_classes=meta["spec"]["num_classes"],
    )
    if expect is not None and spec != expect:
        raise CheckpointError(f"checkpoint spec {spec} does not match expected {expect}")

    torch.manual_seed(0)
    model = _instantiate(spec)
    state = {}
    for name, tensor in model.state_dict().items():
        arr = read_tensor(in_dir / "params" / f"{name}.dfm")
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"parameter {name}: stored shape {arr.shape} != expected {tuple(tensor.shape)}"
            )
        state[name] = torch.as_tensor(arr).to(tensor.dtype)
    model.load_state_dict(state)
    model.eval()
    ckpt = Checkpoint(spec=spec, model=model, provenance=meta.get("provenance", {}))

    recorded = (in_dir / "digest.txt").read_text(encoding="utf-8").strip()
    actual = ckpt.digest()
    if recorded != actual:
        raise CheckpointError(f"digest mismatch in {in_dir}: {recorded} != {actual}")
    return ckpt
