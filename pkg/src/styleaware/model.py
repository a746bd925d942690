"""Encoder, decoder, transformer block and multi-scale discriminator.

Layer naming follows the usual image-translation shorthand:

* ``cFs1-k``  F x F convolution, stride 1, InstanceNorm, ReLU
* ``dF-k``    F x F convolution, stride 2, InstanceNorm, ReLU
* ``Rk``      residual block of two 3x3 conv + InstanceNorm layers
* ``uk``      nearest-neighbour x2 upscaling, then ``c3s1-k``

Every convolution uses reflection padding.  All channel counts are multiplied
by ``NetworkSpec.width_scale``; ``1.0`` gives the full-size networks.
"""

import math
from dataclasses import dataclass, asdict
from typing import List, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, NonFiniteError

ENCODER_WIDTHS = (32, 32, 64, 128, 256)
DECODER_UP_WIDTHS = (256, 128, 64, 32)
DISCRIMINATOR_WIDTHS = (128, 128, 256, 512, 512, 1024, 1024)
# discriminator layers (1-based) that feed an auxiliary classifier
AUX_AFTER = (1, 2, 4, 6)
ENCODER_FACTOR = 16
DISCRIMINATOR_FACTOR = 128


@dataclass
class NetworkSpec:
    width_scale: float = 1.0
    n_residual_blocks: int = 9
    transformer_kernel: int = 10
    instance_norm_epsilon: float = 1e-5
    init_scheme: str = "normal"  # "normal" (std 0.02) or "kaiming"

    def __post_init__(self):
        if not self.width_scale > 0:
            raise ValueError(f"width_scale must be positive, got {self.width_scale}")
        if self.n_residual_blocks < 1:
            raise ValueError("n_residual_blocks must be >= 1")
        if self.transformer_kernel < 1:
            raise ValueError("transformer_kernel must be >= 1")
        if self.init_scheme not in ("normal", "kaiming"):
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")

    def channels(self, base: int) -> int:
        return scaled_channels(base, self.width_scale)

    @property
    def latent_channels(self) -> int:
        return self.channels(ENCODER_WIDTHS[-1])

    def to_dict(self):
        return asdict(self)


def scaled_channels(base: int, width_scale: float) -> int:
    # round half up, never below one channel
    return max(1, int(math.floor(base * width_scale + 0.5)))


def _reflect_index(n: int, before: int, after: int, device) -> torch.Tensor:
    idx = torch.arange(-before, n + after, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx.remainder(period)
    return torch.where(idx >= n, period - idx, idx)


def reflect_pad(x: torch.Tensor, left: int, right: int, top: int, bottom: int) -> torch.Tensor:
    """Mirror padding (edge pixel not repeated) that also works when a pad
    is as large as or larger than the padded dimension."""
    if left == right == top == bottom == 0:
        return x
    h, w = x.shape[-2:]
    if max(left, right) < w and max(top, bottom) < h:
        return F.pad(x, (left, right, top, bottom), mode="reflect")
    rows = _reflect_index(h, top, bottom, x.device)
    cols = _reflect_index(w, left, right, x.device)
    return x.index_select(-2, rows).index_select(-1, cols)


def _same_padding(kernel: int):
    total = kernel - 1
    return total // 2, total - total // 2


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalisation over the spatial dimensions.

    Written out instead of using ``nn.InstanceNorm2d`` because the latter
    refuses 1x1 feature maps, which the deepest layers produce on small
    inputs.  A 1x1 map normalises to zero.
    """

    def __init__(self, channels: int, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.affine = affine
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = (x - mean).pow(2).mean(dim=(2, 3), keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps)

    def forward(self, x):
        out = self.normalize(x)
        if self.affine:
            out = out * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)
        return out


class ReflectConv(nn.Module):
    """Convolution with reflection padding; output size is ceil(input/stride)."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, bias=True):
        super().__init__()
        self.pad = _same_padding(kernel)
        self.stride = stride
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=0, bias=bias)

    def forward(self, x):
        before, after = self.pad
        return self.conv(reflect_pad(x, before, after, before, after))


_ACTIVATIONS = {
    "relu": lambda: nn.ReLU(),
    "lrelu": lambda: nn.LeakyReLU(0.2),
    "sigmoid": lambda: nn.Sigmoid(),
    "none": lambda: nn.Identity(),
}


class ConvNormAct(nn.Module):
    # convolution bias is only kept when there is no InstanceNorm to cancel it
    def __init__(self, in_ch, out_ch, kernel, stride=1, act="relu", eps=1e-5, norm=True):
        super().__init__()
        self.conv = ReflectConv(in_ch, out_ch, kernel, stride, bias=not norm)
        self.norm = InstanceNorm(out_ch, eps) if norm else nn.Identity()
        self.act = _ACTIVATIONS[act]()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.body = nn.Sequential(
            ConvNormAct(channels, channels, 3, act="relu", eps=eps),
            ConvNormAct(channels, channels, 3, act="none", eps=eps),
        )

    def forward(self, x):
        return x + self.body(x)


class UpBlock(nn.Module):
    """Nearest-neighbour x2 upscaling followed by a stride-1 conv block."""

    def __init__(self, in_ch, out_ch, eps=1e-5):
        super().__init__()
        self.conv = ConvNormAct(in_ch, out_ch, 3, act="relu", eps=eps)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """InstanceNorm, c3s1-32, d3-32, d3-64, d3-128, d3-256."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        eps = spec.instance_norm_epsilon
        widths = [spec.channels(c) for c in ENCODER_WIDTHS]
        self.input_norm = InstanceNorm(3, eps, affine=False)
        self.conv1 = ConvNormAct(3, widths[0], 3, stride=1, eps=eps)
        self.down = nn.Sequential(*[
            ConvNormAct(widths[i], widths[i + 1], 3, stride=2, eps=eps)
            for i in range(len(widths) - 1)
        ])
        self.out_channels = widths[-1]

    def conv1_features(self, x):
        return self.conv1(self.input_norm(x))

    def forward(self, x):
        return self.down(self.conv1_features(x))


class Decoder(nn.Module):
    """R256 x n, u256, u128, u64, u32, c7s1-3-sigmoid."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        eps = spec.instance_norm_epsilon
        latent = spec.latent_channels
        self.residual = nn.Sequential(*[ResidualBlock(latent, eps) for _ in range(spec.n_residual_blocks)])
        ups = []
        in_ch = latent
        for base in DECODER_UP_WIDTHS:
            out_ch = spec.channels(base)
            ups.append(UpBlock(in_ch, out_ch, eps))
            in_ch = out_ch
        self.up = nn.Sequential(*ups)
        self.out = ConvNormAct(in_ch, 3, 7, act="sigmoid", eps=eps)

    def forward(self, z):
        return self.out(self.up(self.residual(z)))


class TransformerBlock(nn.Module):
    """One convolution with 3 filters whose weights are renormalised to unit
    L2 norm (per output filter) on every forward pass."""

    def __init__(self, kernel: int = 10):
        super().__init__()
        self.kernel = kernel
        self.pad = _same_padding(kernel)
        self.weight_v = nn.Parameter(torch.empty(3, 3, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(3))
        nn.init.uniform_(self.weight_v, 0.0, 1.0)

    def effective_weight(self):
        norm = self.weight_v.flatten(1).norm(dim=1).clamp_min(1e-12)
        return self.weight_v / norm.view(-1, 1, 1, 1)

    def forward(self, x):
        before, after = self.pad
        x = reflect_pad(x, before, after, before, after)
        return F.conv2d(x, self.effective_weight(), self.bias)


class DiscriminatorOutput(NamedTuple):
    main: torch.Tensor
    aux: List[torch.Tensor]

    def maps(self):
        return [self.main, *self.aux]


class Discriminator(nn.Module):
    """Seven d5-k-LReLU layers, a c3s1-1 logit head and 3x3 auxiliary
    single-filter classifiers after layers 1, 2, 4 and 6.

    Logit heads are plain convolutions with bias (no norm, no activation).
    The first layer has no InstanceNorm.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        eps = spec.instance_norm_epsilon
        layers = []
        in_ch = 3
        self.aux_heads = nn.ModuleDict()
        for i, base in enumerate(DISCRIMINATOR_WIDTHS, start=1):
            out_ch = spec.channels(base)
            # no InstanceNorm on the first layer: it would erase the global
            # colour statistics the discriminator needs
            layers.append(ConvNormAct(in_ch, out_ch, 5, stride=2, act="lrelu", eps=eps, norm=i > 1))
            if i in AUX_AFTER:
                self.aux_heads[str(i)] = ReflectConv(out_ch, 1, 3)
            in_ch = out_ch
        self.layers = nn.ModuleList(layers)
        self.head = ReflectConv(in_ch, 1, 3)

    def forward(self, x) -> DiscriminatorOutput:
        aux = []
        h = x
        for i, layer in enumerate(self.layers, start=1):
            h = layer(h)
            if str(i) in self.aux_heads:
                aux.append(self.aux_heads[str(i)](h))
        return DiscriminatorOutput(self.head(h), aux)


def init_weights(module: nn.Module, scheme: str = "normal") -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if scheme == "normal":
                nn.init.normal_(m.weight, 0.0, 0.02)
            else:
                nn.init.kaiming_normal_(m.weight, a=0.2)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class StyleTransferNetworks(nn.Module):
    """Container for the four jointly trained networks."""

    def __init__(self, spec: NetworkSpec = None, seed: int = None):
        super().__init__()
        self.spec = spec or NetworkSpec()
        with torch.random.fork_rng(enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self.encoder = Encoder(self.spec)
            self.decoder = Decoder(self.spec)
            self.transformer = TransformerBlock(self.spec.transformer_kernel)
            self.discriminator = Discriminator(self.spec)
            for net in (self.encoder, self.decoder, self.discriminator):
                init_weights(net, self.spec.init_scheme)

    def stylizer_parameters(self):
        """Parameters updated in the encoder-decoder branch (E, G and T)."""
        return [*self.encoder.parameters(), *self.decoder.parameters(), *self.transformer.parameters()]

    def discriminator_parameters(self):
        return list(self.discriminator.parameters())

    def stylize(self, x):
        return stylize(x, self.encoder, self.decoder)


def check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")


def check_image_batch(x: torch.Tensor, factor: int = 1, what: str = "image batch") -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"{what} must have shape [N, 3, H, W], got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if x.shape[0] < 1:
        raise ShapeError(f"{what} is empty")
    if factor > 1 and (h % factor or w % factor):
        raise ShapeError(f"{what} spatial dims {h}x{w} are not divisible by {factor}")
    check_finite(x, what)


def encode(x: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    check_image_batch(x, ENCODER_FACTOR)
    return encoder(x)


def decode(z: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    check_finite(z, "latent code")
    for name, p in decoder.named_parameters():
        check_finite(p, f"decoder parameter {name}")
    return decoder(z)


def stylize(x: torch.Tensor, encoder: Encoder, decoder: Decoder) -> torch.Tensor:
    """decode(encode(x)), one sample at a time.

    Batched convolution kernels may round differently from single-image
    ones, so samples are run separately to keep ``stylize(x)[i]`` bitwise
    equal to ``stylize(x[i:i+1])``.
    """
    check_image_batch(x, ENCODER_FACTOR)
    if x.shape[0] == 1:
        return decode(encoder(x), decoder)
    return torch.cat([decode(encoder(x[i:i + 1]), decoder) for i in range(x.shape[0])])


def discriminate(img: torch.Tensor, discriminator: Discriminator) -> DiscriminatorOutput:
    """Raw logits.  For inputs divisible by 128 the main map is H/128 x W/128;
    other sizes give ceil(H/128) (each stride-2 stage rounds up)."""
    check_image_batch(img)
    return discriminator(img)


def transform(img: torch.Tensor, transformer: TransformerBlock) -> torch.Tensor:
    check_finite(img, "transformer input")
    return transformer(img)
