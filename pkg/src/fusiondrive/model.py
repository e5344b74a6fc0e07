"""RGB-D fusion encoder, semantic decoder and command-branched driving policy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .commands import ControlCommand, NavCommand

N_BRANCHES = len(NavCommand)


@dataclass
class ModelConfig:
    input_size: int = 96
    input_channels: int = 4
    block: str = "basic"
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (16, 32, 48, 64)
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    decoder_filters: tuple[int, ...] = (32, 16, 16, 8, 5)
    decoder_strides: tuple[int, ...] = (4, 2, 2, 2, 1)
    branch_hidden: tuple[int, ...] = (64, 64)
    dropout: float = 0.5
    n_classes: int = 5
    use_decoder: bool = True

    def __post_init__(self):
        self.stage_widths = tuple(self.stage_widths)
        self.stage_depths = tuple(self.stage_depths)
        self.decoder_filters = tuple(self.decoder_filters)
        self.decoder_strides = tuple(self.decoder_strides)
        self.branch_hidden = tuple(self.branch_hidden)
        if self.input_channels not in (3, 4):
            raise ValueError("input_channels must be 3 (RGB) or 4 (RGBD)")
        if self.input_size % 32:
            raise ValueError("input_size must be a multiple of 32")
        if len(self.stage_widths) != 4 or len(self.stage_depths) != 4:
            raise ValueError("encoder needs exactly four stages")
        if self.use_decoder:
            if len(self.decoder_filters) != len(self.decoder_strides):
                raise ValueError("decoder filters and strides differ in length")
            if self.decoder_filters[-1] != self.n_classes:
                raise ValueError("last decoder layer must have n_classes filters")
            prod = 1
            for s in self.decoder_strides:
                prod *= s
            if prod * (self.input_size // 32) != self.input_size:
                raise ValueError("decoder strides must undo the encoder's downsampling")

    @property
    def latent_size(self) -> int:
        mult = 4 if self.block == "bottleneck" else 1
        return self.stage_widths[-1] * mult

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def resnet50_v2_config(input_size: int = 224, input_channels: int = 4) -> ModelConfig:
    """Full-width configuration with the bottleneck layout of ResNet-50 V2."""
    return ModelConfig(
        input_size=input_size,
        input_channels=input_channels,
        block="bottleneck",
        stem_width=64,
        stage_widths=(64, 128, 256, 512),
        stage_depths=(3, 4, 6, 3),
        decoder_filters=(512, 128, 64, 16, 5),
        branch_hidden=(256, 256),
    )


class PreActBasic(nn.Module):
    expansion = 1

    def __init__(self, c_in: int, width: int, stride: int):
        super().__init__()
        c_out = width
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride, bias=False)

    def forward(self, x):
        pre = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(pre)
        out = self.conv1(pre)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + skip


class PreActBottleneck(nn.Module):
    expansion = 4

    def __init__(self, c_in: int, width: int, stride: int):
        super().__init__()
        c_out = width * 4
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, width, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, c_out, 1, bias=False)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride, bias=False)

    def forward(self, x):
        pre = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(pre)
        out = self.conv1(pre)
        out = self.conv2(F.relu(self.bn2(out)))
        out = self.conv3(F.relu(self.bn3(out)))
        return out + skip


class FusionEncoder(nn.Module):
    """Stem (stride 4) followed by four pre-activation stages (strides 1, 2, 2, 2)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        block = PreActBottleneck if cfg.block == "bottleneck" else PreActBasic
        self.stem = nn.Conv2d(cfg.input_channels, cfg.stem_width, 3, 2, 1, bias=False)
        self.pool = nn.MaxPool2d(3, 2, 1)
        layers = []
        c = cfg.stem_width
        for i, (width, depth) in enumerate(zip(cfg.stage_widths, cfg.stage_depths)):
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(block(c, width, stride))
                c = width * block.expansion
        self.stages = nn.Sequential(*layers)
        self.post_bn = nn.BatchNorm2d(c)
        self.out_channels = c

    def forward(self, x):
        x = self.pool(self.stem(x))
        x = self.stages(x)
        return F.relu(self.post_bn(x))


def _deconv(c_in: int, c_out: int, stride: int, kernel: int = 3) -> nn.ConvTranspose2d:
    # Smallest padding whose output_padding scales the map by exactly `stride`. When
    # kernel < stride this is padding 0, so the uncovered output positions are spread
    # one per stride cell instead of piling up on the bottom/right border.
    padding = max(0, math.ceil((kernel - stride) / 2))
    output_padding = stride - kernel + 2 * padding
    return nn.ConvTranspose2d(c_in, c_out, kernel, stride, padding=padding, output_padding=output_padding)


class SceneDecoder(nn.Module):
    def __init__(self, c_in: int, filters, strides):
        super().__init__()
        layers = []
        for i, (f, s) in enumerate(zip(filters, strides)):
            layers.append(_deconv(c_in, f, s))
            if i < len(filters) - 1:
                layers.append(nn.BatchNorm2d(f))
                layers.append(nn.ReLU())
            c_in = f
        self.net = nn.Sequential(*layers)

    def forward(self, feature_map):
        """Per-pixel class logits; softmax is applied by the caller."""
        return self.net(feature_map)


class Branch(nn.Module):
    def __init__(self, c_in: int, hidden, dropout: float):
        super().__init__()
        layers = []
        for h in hidden:
            layers += [nn.Linear(c_in, h), nn.ReLU(), nn.Dropout(dropout)]
            c_in = h
        layers.append(nn.Linear(c_in, 2))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        out = self.net(z)
        return torch.stack([torch.tanh(out[:, 0]), torch.sigmoid(out[:, 1])], dim=1)


class BranchedPolicy(nn.Module):
    def __init__(self, c_in: int, hidden, dropout: float):
        super().__init__()
        self.branches = nn.ModuleList(Branch(c_in, hidden, dropout) for _ in range(N_BRANCHES))

    def forward(self, latent: torch.Tensor, command: torch.Tensor) -> torch.Tensor:
        """(steer, speed) per row; each row runs only the branch its command selects."""
        if command.dim() == 0:
            command = command.expand(latent.shape[0])
        if command.numel() and (command.min() < 0 or command.max() >= N_BRANCHES):
            raise ValueError(f"unknown command index in {command.tolist()}")
        out = latent.new_zeros(latent.shape[0], 2)
        for c in torch.unique(command).tolist():
            mask = command == c
            out = out.index_put((mask.nonzero(as_tuple=True)[0],), self.branches[c](latent[mask]))
        return out


class DrivingNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = FusionEncoder(cfg)
        self.decoder = None
        if cfg.use_decoder:
            self.decoder = SceneDecoder(self.encoder.out_channels, cfg.decoder_filters, cfg.decoder_strides)
        self.policy = BranchedPolicy(self.encoder.out_channels, cfg.branch_hidden, cfg.dropout)

    def _check(self, x: torch.Tensor) -> None:
        c, s = self.config.input_channels, self.config.input_size
        if x.dim() != 4 or x.shape[1] != c or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected input (B, {c}, {s}, {s}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(feature_map B x C x S/32 x S/32, latent B x C)."""
        self._check(x)
        fmap = self.encoder(x)
        return fmap, fmap.mean(dim=(2, 3))

    def decode_semantics(self, feature_map: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities, B x n_classes x S x S."""
        if self.decoder is None:
            raise RuntimeError("this configuration has no scene decoder")
        return torch.softmax(self.decoder(feature_map), dim=1)

    def policy_forward(self, latent: torch.Tensor, command) -> torch.Tensor:
        command = torch.as_tensor(command, dtype=torch.long, device=latent.device)
        return self.policy(latent, command)

    def forward(self, x: torch.Tensor, command) -> tuple[torch.Tensor | None, torch.Tensor]:
        fmap, latent = self.encode(x)
        sem = self.decode_semantics(fmap) if self.decoder is not None else None
        return sem, self.policy_forward(latent, command)

    def act(self, x: torch.Tensor, command: NavCommand) -> tuple[torch.Tensor | None, ControlCommand]:
        """Single-observation inference helper."""
        with torch.no_grad():
            sem, ctrl = self(x, torch.tensor([int(command)]))
        return sem, ControlCommand(float(ctrl[0, 0]), float(ctrl[0, 1]))


def count_parameters(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def model_summary(model: DrivingNet) -> str:
    cfg = model.config
    s = cfg.input_size
    rows = [
        f"input            {cfg.input_channels} x {s} x {s}",
        f"encoder          {count_parameters(model.encoder):>10,d} params  -> {model.encoder.out_channels} x {s // 32} x {s // 32}",
        f"decoder          {count_parameters(model.decoder):>10,d} params  -> {cfg.n_classes} x {s} x {s}"
        if model.decoder is not None
        else "decoder          (removed)",
        f"policy branches  {count_parameters(model.policy):>10,d} params  ({N_BRANCHES} x {list(cfg.branch_hidden)} -> 2)",
        f"total            {count_parameters(model):>10,d} params",
    ]
    return "\n".join(rows)


def save_checkpoint(path: Path, model: DrivingNet, meta: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": model.config.to_dict(), "state_dict": model.state_dict(), "meta": meta or {}}, path)


def load_checkpoint(path: Path) -> tuple[DrivingNet, dict]:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = DrivingNet(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("meta", {})
