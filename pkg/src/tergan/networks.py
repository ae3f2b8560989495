"""Encoders, decoder, discriminators and the gradient-reversal layer.

All image tensors are channels-last ``[batch, H, W, 3]`` floats in [0, 1];
modules permute to channels-first internally.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple

import torch
from torch import Tensor, nn

from ._validation import ConfigurationError

N_DOWNSAMPLE = 5


@dataclass
class NetworkSpec:
    image_size: int = 64
    expr_dim: int = 30
    id_dim: int = 50
    n_expressions: int = 6
    n_identities: int = 80
    encoder_channels: List[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    decoder_channels: List[int] = field(default_factory=lambda: [512, 256, 128, 64, 3])
    disc_trunk_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    disc_trunk_fc: int = 1024
    disc_branch_fc: List[int] = field(default_factory=lambda: [512, 256])
    embed_disc_channels: List[int] = field(default_factory=lambda: [32, 16, 1])

    def __post_init__(self):
        self.validate()

    def validate(self):
        lengths = {
            "encoder_channels": 5,
            "decoder_channels": 5,
            "disc_trunk_channels": 4,
            "disc_branch_fc": 2,
            "embed_disc_channels": 3,
        }
        for name, n in lengths.items():
            value = getattr(self, name)
            if len(value) != n:
                raise ConfigurationError(f"{name} must have {n} entries, got {len(value)}")
            if any(int(c) <= 0 for c in value):
                raise ConfigurationError(f"{name} entries must be positive")
        if self.decoder_channels[-1] != 3:
            raise ConfigurationError("decoder_channels must end with 3 (RGB)")
        if self.embed_disc_channels[-1] != 1:
            raise ConfigurationError("embed_disc_channels must end with 1 (single logit)")
        for name in ("image_size", "expr_dim", "id_dim", "disc_trunk_fc"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.image_size % 2 ** N_DOWNSAMPLE:
            raise ConfigurationError(
                f"image_size must be divisible by {2 ** N_DOWNSAMPLE}, got {self.image_size}")
        if self.n_expressions < 2 or self.n_identities < 2:
            raise ConfigurationError("need at least 2 expression and 2 identity classes")

    @property
    def concat_dim(self) -> int:
        return self.expr_dim + self.id_dim

    def scaled(self, divisor: int, **overrides) -> "NetworkSpec":
        """Copy with every hidden width divided by ``divisor`` (floored at 1).

        The RGB output channel and the single embedding-discriminator logit
        are kept.
        """

        def div(values):
            return [max(1, int(v) // divisor) for v in values]

        params = asdict(self)
        params.update(
            encoder_channels=div(self.encoder_channels),
            decoder_channels=div(self.decoder_channels[:-1]) + [3],
            disc_trunk_channels=div(self.disc_trunk_channels),
            disc_trunk_fc=max(1, self.disc_trunk_fc // divisor),
            disc_branch_fc=div(self.disc_branch_fc),
        )
        params.update(overrides)
        return NetworkSpec(**params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown NetworkSpec keys: {sorted(unknown)}")
        return cls(**d)


class DiscriminatorOutput(NamedTuple):
    expr_logits: Tensor  # [batch, n_expressions + 1], last column = fake
    id_logits: Tensor  # [batch, n_identities]


def _to_nchw(x: Tensor, channels: int = 3) -> Tensor:
    if x.dim() != 4 or x.shape[-1] != channels:
        raise ConfigurationError(f"expected [batch, H, W, {channels}] input, got {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2)


def _init_weights(module: nn.Module):
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class DownBlock(nn.Sequential):
    """3x3 stride-1 conv, optional batch norm, activation, 2x average pool."""

    def __init__(self, c_in: int, c_out: int, norm: bool = True, leaky: bool = False):
        layers = [nn.Conv2d(c_in, c_out, 3, stride=1, padding=1)]
        if norm:
            layers.append(nn.BatchNorm2d(c_out))
        layers.append(nn.LeakyReLU(0.2) if leaky else nn.ReLU())
        layers.append(nn.AvgPool2d(2))
        super().__init__(*layers)


class UpBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, last: bool = False):
        layers = [nn.Upsample(scale_factor=2, mode="nearest"),
                  nn.Conv2d(c_in, c_out, 3, stride=1, padding=1)]
        if last:
            layers.append(nn.Sigmoid())
        else:
            layers += [nn.BatchNorm2d(c_out), nn.ReLU()]
        super().__init__(*layers)


class Encoder(nn.Module):
    """Five downsampling blocks followed by a linear embedding layer.

    ``forward`` returns ``(embedding, features)`` where ``features`` holds the
    five block outputs (channels-first); layer ``l`` has side
    ``image_size / 2**l``.
    """

    def __init__(self, spec: NetworkSpec, out_dim: int):
        super().__init__()
        self.image_size = spec.image_size
        self.out_dim = out_dim
        chans = [3] + list(spec.encoder_channels)
        self.blocks = nn.ModuleList(DownBlock(chans[i], chans[i + 1]) for i in range(5))
        side = spec.image_size // 2 ** N_DOWNSAMPLE
        self.fc = nn.Linear(chans[-1] * side * side, out_dim)
        self.apply(_init_weights)

    def forward(self, x: Tensor):
        if x.shape[1] != self.image_size or x.shape[2] != self.image_size:
            raise ConfigurationError(
                f"encoder expects {self.image_size}px images, got {tuple(x.shape[1:3])}")
        h = _to_nchw(x)
        features = []
        for block in self.blocks:
            h = block(h)
            features.append(h)
        return self.fc(h.flatten(1)), features


class Decoder(nn.Module):
    """Linear seed projection then five nearest-upsample + conv blocks."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.in_dim = spec.concat_dim
        self.seed_side = spec.image_size // 2 ** N_DOWNSAMPLE
        self.seed_channels = spec.decoder_channels[0]
        self.fc = nn.Linear(self.in_dim, self.seed_channels * self.seed_side ** 2)
        chans = [self.seed_channels] + list(spec.decoder_channels)
        self.blocks = nn.Sequential(
            *(UpBlock(chans[i], chans[i + 1], last=(i == 4)) for i in range(5)))
        self.apply(_init_weights)

    def forward(self, z: Tensor) -> Tensor:
        if z.dim() != 2 or z.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"decoder expects embeddings of width {self.in_dim}, got {tuple(z.shape)}")
        h = torch.relu(self.fc(z)).view(-1, self.seed_channels, self.seed_side, self.seed_side)
        return self.blocks(h).permute(0, 2, 3, 1)


class Discriminator(nn.Module):
    """Multi-task discriminator with a shared convolutional + FC trunk.

    The expression head has ``n_expressions + 1`` outputs; the extra last
    class means "generated".
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        chans = [3] + list(spec.disc_trunk_channels)
        convs = [DownBlock(chans[i], chans[i + 1], norm=False, leaky=True) for i in range(4)]
        side = spec.image_size // 2 ** 4
        self.convs = nn.Sequential(*convs)
        self.shared_fc = nn.Linear(chans[-1] * side * side, spec.disc_trunk_fc)
        self.expr_head = self._branch(spec.disc_trunk_fc, spec.disc_branch_fc, spec.n_expressions + 1)
        self.id_head = self._branch(spec.disc_trunk_fc, spec.disc_branch_fc, spec.n_identities)
        self.apply(_init_weights)

    @staticmethod
    def _branch(c_in, widths, n_out):
        return nn.Sequential(
            nn.Linear(c_in, widths[0]), nn.LeakyReLU(0.2),
            nn.Linear(widths[0], widths[1]), nn.LeakyReLU(0.2),
            nn.Linear(widths[1], n_out),
        )

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        h = self.convs(_to_nchw(x)).flatten(1)
        h = nn.functional.leaky_relu(self.shared_fc(h), 0.2)
        return DiscriminatorOutput(self.expr_head(h), self.id_head(h))


class EmbeddingDiscriminator(nn.Module):
    """Three FC layers ending in one logit: real-input origin vs generated origin."""

    def __init__(self, in_dim: int, widths=(32, 16, 1)):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, widths[0]), nn.LeakyReLU(0.2),
            nn.Linear(widths[0], widths[1]), nn.LeakyReLU(0.2),
            nn.Linear(widths[1], widths[2]),
        )
        self.apply(_init_weights)

    def forward(self, f: Tensor) -> Tensor:
        if f.dim() != 2 or f.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"embedding discriminator expects width {self.in_dim}, got {tuple(f.shape)}")
        return self.net(f)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.scale * grad_output, None


def gradient_reverse(f: Tensor, scale: float = 1.0) -> Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``-scale``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return _GradReverse.apply(f, float(scale))


class GradientReversal(nn.Module):
    def __init__(self, scale: float = 1.0):
        super().__init__()
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = scale

    def forward(self, f: Tensor) -> Tensor:
        return gradient_reverse(f, self.scale)


def concat_embeddings(f_expr: Tensor, f_id: Tensor) -> Tensor:
    """Expression part first, identity part second."""
    return torch.cat([f_expr, f_id], dim=1)


def split_embedding(z: Tensor, expr_dim: int):
    return z[:, :expr_dim], z[:, expr_dim:]


class TERNetworks(nn.Module):
    """Container for the five networks of one model."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.expr_encoder = Encoder(spec, spec.expr_dim)
        self.id_encoder = Encoder(spec, spec.id_dim)
        self.decoder = Decoder(spec)
        self.discriminator = Discriminator(spec)
        self.expr_disc = EmbeddingDiscriminator(spec.expr_dim, spec.embed_disc_channels)
        self.id_disc = EmbeddingDiscriminator(spec.id_dim, spec.embed_disc_channels)

    def generate(self, x_source: Tensor, x_target: Tensor) -> Tensor:
        f_e, _ = self.expr_encoder(x_source)
        f_i, _ = self.id_encoder(x_target)
        return self.decoder(concat_embeddings(f_e, f_i))


def build_networks(spec: NetworkSpec, seed: int = 0) -> TERNetworks:
    """Construct all networks with a seeded initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TERNetworks(spec)
