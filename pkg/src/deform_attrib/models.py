"""U-net generator and convolutional critic.

Both networks work for 2-D and 3-D inputs laid out as ``(N, C, *spatial)``.
The generator's last layer starts at zero, so an untrained generator is the
identity warp (field mode) or adds nothing (additive mode).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import diffcore


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    ndim: int = 2
    depth: int = 3
    base_channels: int = 16
    output_mode: str = "field"  # "field" or "additive_map"
    final_layer_scale: float = 1.0
    leaky_slope: float = diffcore.LEAKY_SLOPE

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ConfigError(f"ndim must be 2 or 3, got {self.ndim}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.output_mode not in ("field", "additive_map"):
            raise ConfigError(f"unknown output_mode {self.output_mode!r}")

    @property
    def out_channels(self) -> int:
        return self.ndim if self.output_mode == "field" else 1

    def check_input(self, spatial) -> None:
        k = 2 ** self.depth
        if any(s % k for s in spatial):
            raise ConfigError(
                f"input size {tuple(spatial)} not divisible by 2**depth = {k}"
            )


@dataclass
class CriticConfig:
    ndim: int = 2
    channels: list = field(default_factory=lambda: [8, 8, 16, 16, 32, 32])
    strides: list = field(default_factory=lambda: [2, 1, 2, 1, 2, 1])
    leaky_slope: float = diffcore.LEAKY_SLOPE

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ConfigError(f"ndim must be 2 or 3, got {self.ndim}")
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError("channels and strides must be non-empty and equally long")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError("strides must be 1 or 2")

    @property
    def n_layers(self) -> int:
        return len(self.channels)


class Conv(nn.Module):
    def __init__(self, ndim, c_in, c_out, kernel=3, stride=1, zero_init=False, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        self.weight = nn.Parameter(torch.empty(c_out, c_in, *([kernel] * ndim)))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            if bias:
                bound = 1 / math.sqrt(c_in * kernel ** ndim)
                nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return diffcore.conv(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def _instance_norm(x, eps=1e-5):
    dims = tuple(range(2, x.dim()))
    mu = x.mean(dim=dims, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=dims, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by instance norm and a leaky ReLU.

    The convolutions carry no bias: the norm would cancel it.
    """

    def __init__(self, ndim, c_in, c_out, slope):
        super().__init__()
        self.conv1 = Conv(ndim, c_in, c_out, bias=False)
        self.conv2 = Conv(ndim, c_out, c_out, bias=False)
        self.slope = slope

    def forward(self, x):
        x = diffcore.leaky_relu(_instance_norm(self.conv1(x)), self.slope)
        return diffcore.leaky_relu(_instance_norm(self.conv2(x)), self.slope)


class UNetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        b, nd = cfg.base_channels, cfg.ndim
        chans = [b * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList()
        c_prev = in_channels
        for c in chans[:-1]:
            self.encoders.append(ConvBlock(nd, c_prev, c, cfg.leaky_slope))
            c_prev = c
        self.bottleneck = ConvBlock(nd, chans[-2], chans[-1], cfg.leaky_slope)
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            # upsampled deeper features concatenated with the skip at this level
            self.decoders.append(ConvBlock(nd, chans[i + 1] + chans[i], chans[i], cfg.leaky_slope))
        self.head = Conv(nd, chans[0], cfg.out_channels, kernel=1, zero_init=True)

    def forward(self, x):
        self.cfg.check_input(x.shape[2:])
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = diffcore.avg_pool(x, 2)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = diffcore.concatenate([diffcore.upsample(x, 2), skip], axis=1)
            x = dec(x)
        # the scale multiplies the head weights only: a scaled bias would let
        # the field learn a global translation much faster than local structure
        head = self.head
        return diffcore.conv(x, head.weight * self.cfg.final_layer_scale, head.bias)


class Critic(nn.Module):
    """Strided conv stack, global average, then a linear score. No output nonlinearity."""

    def __init__(self, cfg: CriticConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_prev = in_channels
        for c, s in zip(cfg.channels, cfg.strides):
            layers.append(Conv(cfg.ndim, c_prev, c, stride=s))
            c_prev = c
        self.layers = nn.ModuleList(layers)
        # no output bias: the Wasserstein loss is blind to a constant shift
        self.score_weight = nn.Parameter(torch.empty(1, c_prev))
        nn.init.uniform_(self.score_weight, -1 / math.sqrt(c_prev), 1 / math.sqrt(c_prev))

    def forward(self, x):
        if x.dim() != self.cfg.ndim + 2:
            raise diffcore.ShapeError(
                f"critic: expected (N, C, *{self.cfg.ndim} spatial), got {tuple(x.shape)}"
            )
        for layer in self.layers:
            x = diffcore.leaky_relu(layer(x), self.cfg.leaky_slope)
        x = x.mean(dim=tuple(range(2, x.dim())))
        return diffcore.linear(x, self.score_weight)[:, 0]


def conv_params(ndim, c_in, c_out, kernel=3):
    return c_out * c_in * kernel ** ndim + c_out


def generator_param_count(cfg: GeneratorConfig, in_channels: int = 1) -> int:
    b, k = cfg.base_channels, 3 ** cfg.ndim
    chans = [b * 2 ** i for i in range(cfg.depth + 1)]

    def block(ci, co):
        return co * ci * k + co * co * k

    total = 0
    c_prev = in_channels
    for c in chans[:-1]:
        total += block(c_prev, c)
        c_prev = c
    total += block(chans[-2], chans[-1])
    for i in range(cfg.depth):
        total += block(chans[i + 1] + chans[i], chans[i])
    total += cfg.out_channels * chans[0] + cfg.out_channels
    return total


def critic_param_count(cfg: CriticConfig, in_channels: int = 1) -> int:
    total, c_prev = 0, in_channels
    for c in cfg.channels:
        total += conv_params(cfg.ndim, c_prev, c)
        c_prev = c
    return total + c_prev


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- checkpoints ------------------------------------------------------------

def _safe_name(name: str) -> str:
    return name.replace(".", "__") + ".dft"


def save_checkpoint(path, modules: dict, meta: dict) -> None:
    """Write every parameter as a DFT1 file plus ``manifest.json``.

    ``modules`` maps a prefix (e.g. ``"generator"``) to an ``nn.Module``;
    ``meta`` must be JSON-serializable (configs, epoch, validation NCC).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            full = f"{prefix}.{name}"
            fname = _safe_name(full)
            diffcore.save_tensor(path / fname, value.detach().cpu().numpy())
            tensors[full] = fname
    manifest = {"tensors": tensors, **meta}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def load_state(path, module: nn.Module, prefix: str) -> None:
    path = Path(path)
    manifest = read_manifest(path)
    state = {}
    for full, fname in manifest["tensors"].items():
        head, _, name = full.partition(".")
        if head == prefix:
            state[name] = torch.from_numpy(diffcore.load_tensor(path / fname))
    module.load_state_dict(state, strict=True)


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def np_to_batch(arrays, dtype=torch.float32) -> torch.Tensor:
    """Stack 2-D/3-D numpy images into an ``(N, 1, *S)`` tensor."""
    return torch.from_numpy(np.stack([np.asarray(a) for a in arrays])[:, None]).to(dtype)


def modify(generator: UNetGenerator, x1: torch.Tensor):
    """Remove disease evidence from ``x1``; returns ``(x_hat0, generator output)``.

    Field mode warps ``x1`` by the generated field; additive mode adds the
    generated map.
    """
    from .warp import apply_deformation

    out = generator(x1)
    if generator.cfg.output_mode == "field":
        return apply_deformation(x1, out), out
    return x1 + out, out
