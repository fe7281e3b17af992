"""Generators, discriminators, encoder, projection head and task decoders.

Every network owns its parameters as ``nn.Parameter`` objects registered in
construction order, so ``named_parameters()`` is the stable, ordered name
map used by checkpoints. Forward passes go through :mod:`dacl.core`.
"""
from __future__ import annotations

import math
from collections import OrderedDict

import torch
from torch import nn

from . import core
from .errors import ConfigError

D_MIN = 0.5
D_MAX = 80.0
ENCODER_CHANNELS = (32, 64, 128, 256)
EMBED_DIM = 128

ARCH_IDS = ("generator", "discriminator", "encoder", "projection_head", "decoder_depth", "decoder_seg")


class Network(nn.Module):
    arch_id = ""

    def __init__(self, name: str, seed: int):
        super().__init__()
        self.name = name
        self.seed = seed
        self._gen = torch.Generator().manual_seed(seed)

    @property
    def params(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(self.named_parameters())

    def _uniform(self, shape, fan_in: int) -> nn.Parameter:
        bound = 1.0 / math.sqrt(fan_in)
        w = torch.empty(shape).uniform_(-bound, bound, generator=self._gen)
        return nn.Parameter(w)

    def add_conv(self, key: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        self.register_parameter(f"{key}_w", self._uniform((c_out, c_in, k, k), fan_in))
        self.register_parameter(f"{key}_b", self._uniform((c_out,), fan_in))

    def add_deconv(self, key: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_out * k * k
        self.register_parameter(f"{key}_w", self._uniform((c_in, c_out, k, k), fan_in))
        self.register_parameter(f"{key}_b", self._uniform((c_out,), fan_in))

    def add_norm(self, key: str, c: int) -> None:
        self.register_parameter(f"{key}_g", nn.Parameter(torch.ones(c)))
        self.register_parameter(f"{key}_beta", nn.Parameter(torch.zeros(c)))

    def add_linear(self, key: str, d_in: int, d_out: int) -> None:
        self.register_parameter(f"{key}_w", self._uniform((d_out, d_in), d_in))
        self.register_parameter(f"{key}_b", self._uniform((d_out,), d_in))

    def conv(self, key: str, x, stride: int = 1, padding: int | None = None):
        w = getattr(self, f"{key}_w")
        if padding is None:
            padding = w.shape[-1] // 2
        return core.conv2d(x, w, getattr(self, f"{key}_b"), stride=stride, padding=padding)

    def norm(self, key: str, x):
        return core.instance_norm(x, getattr(self, f"{key}_g"), getattr(self, f"{key}_beta"))

    def linear(self, key: str, x):
        return core.linear(x, getattr(self, f"{key}_w"), getattr(self, f"{key}_b"))

    def extra_repr(self) -> str:
        return f"name={self.name!r}, arch_id={self.arch_id!r}, seed={self.seed}"


class Generator(Network):
    """Residual image translator: 3xHxW in [-1, 1] to 3xHxW in [-1, 1]."""

    arch_id = "generator"

    def __init__(self, name: str, seed: int, base: int = 32, n_res: int = 3):
        super().__init__(name, seed)
        self.n_res = n_res
        self.add_conv("c0", 3, base, 7)
        self.add_norm("n0", base)
        self.add_conv("down1", base, 2 * base, 3)
        self.add_norm("ndown1", 2 * base)
        self.add_conv("down2", 2 * base, 4 * base, 3)
        self.add_norm("ndown2", 4 * base)
        for i in range(n_res):
            self.add_conv(f"res{i}a", 4 * base, 4 * base, 3)
            self.add_norm(f"nres{i}a", 4 * base)
            self.add_conv(f"res{i}b", 4 * base, 4 * base, 3)
            self.add_norm(f"nres{i}b", 4 * base)
        self.add_deconv("up1", 4 * base, 2 * base, 3)
        self.add_norm("nup1", 2 * base)
        self.add_deconv("up2", 2 * base, base, 3)
        self.add_norm("nup2", base)
        self.add_conv("out", base, 3, 7)

    def forward(self, x):
        h = core.relu(self.norm("n0", self.conv("c0", x)))
        h = core.relu(self.norm("ndown1", self.conv("down1", h, stride=2)))
        h = core.relu(self.norm("ndown2", self.conv("down2", h, stride=2)))
        for i in range(self.n_res):
            r = core.relu(self.norm(f"nres{i}a", self.conv(f"res{i}a", h)))
            r = self.norm(f"nres{i}b", self.conv(f"res{i}b", r))
            h = core.add(h, r)
        for key in ("up1", "up2"):
            h = core.conv_transpose2d(h, getattr(self, f"{key}_w"), getattr(self, f"{key}_b"))
            h = core.relu(self.norm(f"n{key}", h))
        return core.tanh(self.conv("out", h))


class Discriminator(Network):
    """Patch classifier; raw scores at 1/8 of the input resolution."""

    arch_id = "discriminator"

    def __init__(self, name: str, seed: int, base: int = 32):
        super().__init__(name, seed)
        self.add_conv("c1", 3, base, 4)
        self.add_conv("c2", base, 2 * base, 4)
        self.add_norm("n2", 2 * base)
        self.add_conv("c3", 2 * base, 4 * base, 4)
        self.add_norm("n3", 4 * base)
        self.add_conv("score", 4 * base, 1, 3)

    def forward(self, x):
        h = core.leaky_relu(self.conv("c1", x, stride=2, padding=1))
        h = core.leaky_relu(self.norm("n2", self.conv("c2", h, stride=2, padding=1)))
        h = core.leaky_relu(self.norm("n3", self.conv("c3", h, stride=2, padding=1)))
        return self.conv("score", h)


class Encoder(Network):
    """Four stride-2 stages of conv-norm-ReLU pairs; forward returns the stage outputs, finest first.

    Instance norm keeps activations bounded while the contrastive stage
    trains it: the embedding is normalised, so nothing else stops the
    weights from growing.
    """

    arch_id = "encoder"

    def __init__(self, name: str, seed: int, channels=ENCODER_CHANNELS):
        super().__init__(name, seed)
        self.channels = tuple(channels)
        c_in = 3
        for i, c in enumerate(self.channels):
            self.add_conv(f"s{i}a", c_in, c, 3)
            self.add_norm(f"n{i}a", c)
            self.add_conv(f"s{i}b", c, c, 3)
            self.add_norm(f"n{i}b", c)
            c_in = c

    def forward(self, x):
        feats = []
        h = x
        for i in range(len(self.channels)):
            h = core.relu(self.norm(f"n{i}a", self.conv(f"s{i}a", h, stride=2)))
            h = core.relu(self.norm(f"n{i}b", self.conv(f"s{i}b", h)))
            feats.append(h)
        return feats

    def embed(self, x):
        """Global average of the final stage, shape [N, 256]."""
        return core.global_avg_pool(self.forward(x)[-1])


class ProjectionHead(Network):
    """256 -> 256 -> ReLU -> 128. Output is not normalised here."""

    arch_id = "projection_head"

    def __init__(self, name: str, seed: int, d_in: int = ENCODER_CHANNELS[-1], d_out: int = EMBED_DIM):
        super().__init__(name, seed)
        self.add_linear("fc1", d_in, d_in)
        self.add_linear("fc2", d_in, d_out)

    def forward(self, v):
        return self.linear("fc2", core.relu(self.linear("fc1", v)))


class Decoder(Network):
    """Skip-connected decoder emitting predictions at H/8, H/4, H/2 and H."""

    def __init__(self, name: str, seed: int, task: str, num_classes: int = 12, channels=ENCODER_CHANNELS):
        super().__init__(name, seed)
        if task not in ("depth", "seg"):
            raise ConfigError(f"unknown task {task!r}")
        if task == "seg" and num_classes < 2:
            raise ConfigError("segmentation needs num_classes >= 2")
        self.task = task
        self.arch_id = "decoder_depth" if task == "depth" else "decoder_seg"
        self.out_ch = 1 if task == "depth" else num_classes
        c1, c2, c3, c4 = channels
        # (name, in channels after concat, width); the last level has no skip
        self.levels = [("u3", c4 + c3, c3), ("u2", c3 + c2, c2), ("u1", c2 + c1, c1), ("u0", c1, c1 // 2)]
        for key, c_in, width in self.levels:
            self.add_conv(f"{key}a", c_in, width, 3)
            self.add_conv(f"{key}b", width, width, 3)
            self.add_conv(f"{key}p", width, self.out_ch, 3)

    def forward(self, feats):
        f1, f2, f3, f4 = feats
        skips = [f3, f2, f1, None]
        h = f4
        preds = []
        for (key, _, _), skip in zip(self.levels, skips):
            h = core.upsample2x(h)
            if skip is not None:
                h = core.concat_channels([h, skip])
            h = core.relu(self.conv(f"{key}a", h))
            h = core.relu(self.conv(f"{key}b", h))
            p = self.conv(f"{key}p", h)
            if self.task == "depth":
                p = core.add(core.mul(core.sigmoid(p), D_MAX - D_MIN), D_MIN)
            preds.append(p)
        return preds


class TaskNetwork(nn.Module):
    """Encoder plus decoder; returns the four-scale prediction list."""

    def __init__(self, encoder: Encoder, decoder: Decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, x):
        return self.decoder(self.encoder(x))


def build_generator(seed: int, name: str = "G") -> Generator:
    return Generator(name, seed)


def build_discriminator(seed: int, name: str = "D") -> Discriminator:
    return Discriminator(name, seed)


def build_encoder(seed: int, name: str = "f") -> Encoder:
    return Encoder(name, seed)


def build_projection_head(seed: int, name: str = "psi") -> ProjectionHead:
    return ProjectionHead(name, seed)


def build_task_decoder(task: str, num_classes: int, seed: int, name: str = "dec") -> Decoder:
    return Decoder(name, seed, task, num_classes)
