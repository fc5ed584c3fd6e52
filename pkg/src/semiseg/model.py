"""U-Net backbone with a main softmax head and an optional over-clustering head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

DEPTH = 4
DIVISOR = 2**DEPTH
CHECKPOINT_FORMAT = "semiseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class SoftPrediction:
    """Per-pixel class probabilities ``probs`` (N, K, H, W) and ``validity`` (N, H, W)."""

    probs: torch.Tensor
    validity: torch.Tensor

    def __post_init__(self):
        if self.probs.dim() != 4:
            raise ValueError(f"probs must be (N, K, H, W), got {tuple(self.probs.shape)}")
        if self.validity.shape != (self.probs.shape[0],) + tuple(self.probs.shape[2:]):
            raise ValueError("validity must be (N, H, W) matching probs")
        self.validity = self.validity.to(torch.bool)

    @classmethod
    def full(cls, probs: torch.Tensor) -> "SoftPrediction":
        n, _, h, w = probs.shape
        return cls(probs, torch.ones(n, h, w, dtype=torch.bool, device=probs.device))

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def hard(self) -> torch.Tensor:
        return self.probs.argmax(dim=1)

    def detach(self) -> "SoftPrediction":
        return SoftPrediction(self.probs.detach(), self.validity)

    def __getitem__(self, idx) -> "SoftPrediction":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return SoftPrediction(self.probs[idx], self.validity[idx])


def _double_conv(cin: int, cout: int, batch_norm: bool = False) -> nn.Sequential:
    layers = []
    for i, o in ((cin, cout), (cout, cout)):
        layers.append(nn.Conv2d(i, o, 3, padding=1))
        if batch_norm:
            layers.append(nn.BatchNorm2d(o))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Original U-Net layout (4 down / 4 up stages) with padded convolutions.

    ``base_width=64`` gives the original stage widths 64-128-256-512-1024.
    Inputs whose sides are not multiples of 16 are reflect-padded internally
    and the output is cropped back, unless ``pad_input`` is False.
    ``batch_norm`` inserts BatchNorm after every 3x3 convolution (not part of
    the original layout).
    """

    def __init__(
        self,
        in_channels: int = 1,
        n_classes: int = 2,
        n_aux_classes: int | None = None,
        base_width: int = 64,
        pad_input: bool = True,
        batch_norm: bool = False,
    ):
        super().__init__()
        if in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if n_aux_classes is not None and n_aux_classes <= n_classes:
            raise ValueError("auxiliary head needs more classes than the main head")
        self.config = dict(
            in_channels=in_channels,
            n_classes=n_classes,
            n_aux_classes=n_aux_classes,
            base_width=base_width,
            pad_input=pad_input,
            batch_norm=batch_norm,
        )
        widths = [base_width * 2**i for i in range(DEPTH + 1)]
        self.widths = widths
        self.down = nn.ModuleList(
            [_double_conv(in_channels, widths[0], batch_norm)]
            + [_double_conv(widths[i], widths[i + 1], batch_norm) for i in range(DEPTH)]
        )
        self.upconv = nn.ModuleList(
            [nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in range(DEPTH)]
        )
        self.up = nn.ModuleList([_double_conv(2 * widths[i], widths[i], batch_norm) for i in range(DEPTH)])
        self.main_head = nn.Conv2d(widths[0], n_classes, 1)
        self.aux_head = nn.Conv2d(widths[0], n_aux_classes, 1) if n_aux_classes else None

    @property
    def n_classes(self) -> int:
        return self.main_head.out_channels

    @property
    def has_aux(self) -> bool:
        return self.aux_head is not None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < DEPTH:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for i in reversed(range(DEPTH)):
            x = self.up[i](torch.cat([self.upconv[i](x), skips[i]], dim=1))
        return x

    def forward(self, x: torch.Tensor):
        """Return ``(main_probs, aux_probs_or_None)`` as (N, K, H, W) tensors."""
        if x.dim() != 4:
            raise ValueError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        pad_h, pad_w = (-h) % DIVISOR, (-w) % DIVISOR
        if pad_h or pad_w:
            if not self.config["pad_input"]:
                raise ValueError(f"input size {h}x{w} must be divisible by {DIVISOR}")
            if h < DIVISOR or w < DIVISOR:
                raise ValueError(f"input size {h}x{w} must be at least {DIVISOR} (divisible by {DIVISOR} after padding)")
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        feats = self.features(x)[..., :h, :w]
        main = torch.softmax(self.main_head(feats), dim=1)
        aux = torch.softmax(self.aux_head(feats), dim=1) if self.aux_head is not None else None
        return main, aux


def unet_parameter_count(in_channels: int, n_classes: int, base_width: int = 64, n_aux_classes: int | None = None) -> int:
    """Closed-form parameter count of :class:`UNet`."""
    w = [base_width * 2**i for i in range(DEPTH + 1)]

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    total = conv(in_channels, w[0], 3) + conv(w[0], w[0], 3)
    for i in range(DEPTH):
        total += conv(w[i], w[i + 1], 3) + conv(w[i + 1], w[i + 1], 3)
        total += conv(w[i + 1], w[i], 2)
        total += conv(2 * w[i], w[i], 3) + conv(w[i], w[i], 3)
    total += conv(w[0], n_classes, 1)
    if n_aux_classes:
        total += conv(w[0], n_aux_classes, 1)
    return total


def forward(net: UNet, image) -> tuple[SoftPrediction, SoftPrediction | None]:
    """Run ``net`` on an image or batch; returns main and auxiliary predictions."""
    x = torch.as_tensor(image)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[None]
    x = x.to(next(net.parameters()).dtype)
    main, aux = net(x)
    return SoftPrediction.full(main), (SoftPrediction.full(aux) if aux is not None else None)


# -- checkpoints -------------------------------------------------------------


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, net: UNet, run_config: dict | None = None, stats_path=None, **extra) -> Path:
    """Write a versioned checkpoint container.

    Keys: ``format``, ``version``, ``net_config``, ``state_dict``,
    ``config_fingerprint`` (sha256 of the run config JSON), ``stats_path``
    (normalization stats file, relative to the checkpoint) and any ``extra``
    metadata such as ``epoch`` and ``policy``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": dict(net.config),
        "state_dict": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "config_fingerprint": config_fingerprint(run_config or {}),
        "stats_path": None if stats_path is None else str(stats_path),
        **extra,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[UNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    net = UNet(**payload["net_config"])
    net.load_state_dict(payload["state_dict"])
    return net, payload
