"""The four networks: embedding encoder, conditional generator, critic, classifier.

All convolutions use 5x5 kernels with stride-2 down/upsampling. The encoder,
generator, and classifier use batch normalization; the critic deliberately
does not (its input-gradient penalty works best without batch coupling).
Spatial sizes run between the configured input size and a 4x4 core, so the
input size must be a power of two of at least 8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DEFAULT_INPUT_SIZE = 128
DEFAULT_EMBED_DIM = 512
DEFAULT_NOISE_DIM = 128
DEFAULT_BASE_CHANNELS = 16

_INIT_STD = 0.02
_NORM_EPS = 1e-12


def _check_input_size(input_size: int) -> int:
    if input_size < 8 or input_size & (input_size - 1):
        raise ValueError(f"input_size must be a power of two >= 8, got {input_size}")
    return int(math.log2(input_size)) - 2  # stride-2 blocks down to 4x4


def _conv_channels(base_channels: int, n_blocks: int) -> list[int]:
    return [base_channels * 2**i for i in range(n_blocks)]


class EncoderNet(nn.Module):
    """Strided conv stack + FC head producing a unit-norm embedding."""

    def __init__(
        self,
        input_size: int = DEFAULT_INPUT_SIZE,
        embed_dim: int = DEFAULT_EMBED_DIM,
        base_channels: int = DEFAULT_BASE_CHANNELS,
    ):
        super().__init__()
        n_blocks = _check_input_size(input_size)
        self.input_size = input_size
        self.embed_dim = embed_dim
        channels = _conv_channels(base_channels, n_blocks)
        layers: list[nn.Module] = []
        in_ch = 1
        for out_ch in channels:
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2),
                nn.BatchNorm2d(out_ch),
                nn.LeakyReLU(0.2),
            ]
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch * 4 * 4, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _validate_matrix_input(x, self.input_size, "encoder")
        h = self.conv(x)
        e = self.fc(h.flatten(1))
        return e / e.norm(dim=1, keepdim=True).clamp_min(_NORM_EPS)


class GeneratorNet(nn.Module):
    """Conditional generator: embedding + noise in, one fake feature matrix out."""

    def __init__(
        self,
        input_size: int = DEFAULT_INPUT_SIZE,
        embed_dim: int = DEFAULT_EMBED_DIM,
        noise_dim: int = DEFAULT_NOISE_DIM,
        base_channels: int = DEFAULT_BASE_CHANNELS,
    ):
        super().__init__()
        n_blocks = _check_input_size(input_size)
        self.input_size = input_size
        self.embed_dim = embed_dim
        self.noise_dim = noise_dim
        channels = _conv_channels(base_channels, n_blocks)
        self.top_channels = channels[-1]
        self.fc = nn.Linear(embed_dim + noise_dim, self.top_channels * 4 * 4)
        layers: list[nn.Module] = []
        for in_ch, out_ch in zip(channels[::-1], channels[-2::-1]):
            layers += [
                nn.ConvTranspose2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2, output_padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
            ]
        layers.append(
            nn.ConvTranspose2d(channels[0], 1, kernel_size=5, stride=2, padding=2, output_padding=1)
        )
        self.deconv = nn.Sequential(*layers)

    def forward(self, embedding: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        if embedding.ndim != 2 or embedding.shape[1] != self.embed_dim:
            raise ValueError(
                f"generator expects embeddings of dim {self.embed_dim}, got shape {tuple(embedding.shape)}"
            )
        if noise.ndim != 2 or noise.shape[1] != self.noise_dim:
            raise ValueError(
                f"generator expects noise of dim {self.noise_dim}, got shape {tuple(noise.shape)}"
            )
        if embedding.shape[0] != noise.shape[0]:
            raise ValueError("embedding and noise batch sizes differ")
        h = self.fc(torch.cat([embedding, noise], dim=1))
        h = h.view(-1, self.top_channels, 4, 4)
        return self.deconv(h)


class DiscriminatorNet(nn.Module):
    """Critic scoring how real a feature matrix looks; unbounded scalar output."""

    def __init__(self, input_size: int = DEFAULT_INPUT_SIZE, base_channels: int = DEFAULT_BASE_CHANNELS):
        super().__init__()
        n_blocks = _check_input_size(input_size)
        self.input_size = input_size
        layers: list[nn.Module] = []
        in_ch = 1
        for out_ch in _conv_channels(base_channels, n_blocks):
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2),
                nn.LeakyReLU(0.2),
            ]
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch * 4 * 4, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _validate_matrix_input(x, self.input_size, "critic")
        return self.fc(self.conv(x).flatten(1)).squeeze(1)


class ClassifierNet(nn.Module):
    """Speaker-ID classifier over feature matrices; emits C logits."""

    def __init__(
        self,
        input_size: int = DEFAULT_INPUT_SIZE,
        n_classes: int = 2,
        base_channels: int = DEFAULT_BASE_CHANNELS,
    ):
        super().__init__()
        max_blocks = _check_input_size(input_size)
        n_blocks = min(3, max_blocks)
        self.input_size = input_size
        self.n_classes = n_classes
        layers: list[nn.Module] = []
        in_ch = 1
        for out_ch in _conv_channels(base_channels, n_blocks):
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2),
                nn.BatchNorm2d(out_ch),
                nn.LeakyReLU(0.2),
            ]
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        side = input_size // 2**n_blocks
        self.fc = nn.Linear(in_ch * side * side, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _validate_matrix_input(x, self.input_size, "classifier")
        return self.fc(self.conv(x).flatten(1))


@dataclass
class NetBundle:
    """The four jointly trained networks."""

    encoder: EncoderNet
    generator: GeneratorNet
    critic: DiscriminatorNet
    classifier: ClassifierNet

    def named(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "generator": self.generator,
            "critic": self.critic,
            "classifier": self.classifier,
        }


def init_params(
    seed: int,
    *,
    input_size: int = DEFAULT_INPUT_SIZE,
    embed_dim: int = DEFAULT_EMBED_DIM,
    noise_dim: int = DEFAULT_NOISE_DIM,
    n_classes: int = 2,
    base_channels: int = DEFAULT_BASE_CHANNELS,
) -> NetBundle:
    """Build all four networks with deterministic, seed-driven initialization."""
    bundle = NetBundle(
        encoder=EncoderNet(input_size, embed_dim, base_channels),
        generator=GeneratorNet(input_size, embed_dim, noise_dim, base_channels),
        critic=DiscriminatorNet(input_size, base_channels),
        classifier=ClassifierNet(input_size, n_classes, base_channels),
    )
    g = torch.Generator().manual_seed(seed)
    for name, net in bundle.named().items():
        reset_parameters(net, g)
        # Keep the degenerate all-zero input off the zero embedding: a small
        # constant head bias pins it to a fixed unit direction instead.
        if name == "encoder":
            with torch.no_grad():
                bundle.encoder.fc.bias.fill_(0.01)
    return bundle


def reset_parameters(net: nn.Module, generator: torch.Generator) -> None:
    """Gaussian(0, 0.02) weights, zero biases, identity batch-norm transforms."""
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                module.weight.copy_(torch.randn(module.weight.shape, generator=generator) * _INIT_STD)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.reset_running_stats()


def _validate_matrix_input(x: torch.Tensor, input_size: int, name: str) -> None:
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != input_size or x.shape[3] != input_size:
        raise ValueError(
            f"{name} expects input of shape (B, 1, {input_size}, {input_size}),"
            f" got {tuple(x.shape)}"
        )


def as_input_batch(x: "np.ndarray | torch.Tensor", dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Coerce (H, W), (B, H, W), or (B, 1, H, W) arrays to a (B, 1, H, W) tensor."""
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=dtype)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim == 3:
        t = t.unsqueeze(1)
    if t.ndim != 4:
        raise ValueError(f"cannot interpret input of shape {tuple(x.shape)} as feature matrices")
    return t


def _inference(net: nn.Module, fn):
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return fn()
    finally:
        net.train(was_training)


def encode(net: EncoderNet, x) -> torch.Tensor:
    """Embed matrices in inference mode (running batch-norm statistics, no grad)."""
    batch = as_input_batch(x, dtype=next(net.parameters()).dtype)
    return _inference(net, lambda: net(batch))


def generate(net: GeneratorNet, embedding: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Synthesize fake matrices in inference mode."""
    if embedding.ndim == 1:
        embedding = embedding.unsqueeze(0)
    if noise.ndim == 1:
        noise = noise.unsqueeze(0)
    return _inference(net, lambda: net(embedding, noise))


def discriminate(net: DiscriminatorNet, x) -> torch.Tensor:
    """Score matrices in inference mode; one scalar per input, order preserved."""
    batch = as_input_batch(x, dtype=next(net.parameters()).dtype)
    return _inference(net, lambda: net(batch))


def classify(net: ClassifierNet, x) -> torch.Tensor:
    """Speaker logits in inference mode."""
    batch = as_input_batch(x, dtype=next(net.parameters()).dtype)
    return _inference(net, lambda: net(batch))
