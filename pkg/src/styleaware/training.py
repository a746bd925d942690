"""Joint training of encoder, decoder, transformer block and discriminator.

Each step updates exactly one side.  The discriminator is updated while its
exponential-moving-average accuracy is below ``acc_gate``, otherwise the
encoder, decoder and transformer block are updated.  The batch consumed by
step ``k`` depends only on ``(seed, k)``, so a run resumed from a checkpoint
reproduces the uninterrupted run bit for bit.
"""

import dataclasses
import hashlib
import json
import logging
import math
import sys
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, ConfigError, NonFiniteLossError, ShapeError, NonFiniteError
from .losses import (
    LossReport,
    adversarial_d_loss,
    adversarial_g_loss,
    conv1_feature_loss,
    style_aware_content_loss,
    total_loss,
    transformed_image_loss,
)
from .model import NetworkSpec, StyleTransferNetworks, DiscriminatorOutput

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "styleaware-checkpoint"
CHECKPOINT_VERSION = 1
IMAGE_LOSSES = ("transformed", "conv1", "none")

# config-file key -> dataclass field, for names that are Python keywords
_KEY_ALIASES = {"lambda": "lam"}


@dataclass
class TrainConfig:
    patch_size: int = 768
    batch_size: int = 1
    lr: float = 2e-4
    total_iters: int = 300_000
    lr_drop_iter: int = 200_000
    lr_drop_factor: float = 10.0
    lam: float = 0.001
    acc_gate: float = 0.8
    ema_coeff: float = 0.05
    ema_init: float = 0.5
    seed: int = 0
    width_scale: float = 1.0
    n_residual_blocks: int = 9
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1000
    # ablation switches
    content_loss: bool = True
    image_loss: str = "transformed"
    saturating_g: bool = False

    def __post_init__(self):
        if not 0 < self.acc_gate < 1:
            raise ConfigError(f"acc_gate must be in (0, 1), got {self.acc_gate}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.lr_drop_iter < self.total_iters:
            raise ConfigError("lr_drop_iter must be smaller than total_iters")
        if self.patch_size % 16:
            raise ConfigError(f"patch_size must be divisible by 16, got {self.patch_size}")
        if not 0 < self.ema_coeff < 1:
            raise ConfigError("ema_coeff must be in (0, 1)")
        if not 0 <= self.ema_init <= 1:
            raise ConfigError("ema_init must be in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be positive")
        if self.lr_drop_factor <= 0:
            raise ConfigError("lr_drop_factor must be positive")
        if self.image_loss not in IMAGE_LOSSES:
            raise ConfigError(f"image_loss must be one of {IMAGE_LOSSES}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small CPU-sized defaults: 64 px patches, 1/8 width, 200 iterations."""
        params = dict(patch_size=64, width_scale=0.125, total_iters=200, lr_drop_iter=150,
                      checkpoint_every=100)
        params.update(overrides)
        return cls(**params)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(width_scale=self.width_scale, n_residual_blocks=self.n_residual_blocks)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment.  Keys are TrainConfig
    field names (``lambda`` is accepted for ``lam``)."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = (base or TrainConfig()).to_dict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(raw, fields[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return TrainConfig(**values)


def load_config(path, base: TrainConfig = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def format_config(config: TrainConfig) -> str:
    inverse = {v: k for k, v in _KEY_ALIASES.items()}
    lines = []
    for name, value in config.to_dict().items():
        lines.append(f"{inverse.get(name, name)} = {value}")
    return "\n".join(lines) + "\n"


def save_config(config: TrainConfig, path) -> None:
    Path(path).write_text(format_config(config), encoding="utf-8")


# --------------------------------------------------------------------------
# schedule, gate bookkeeping, data

def lr_at(iteration: int, config: TrainConfig) -> float:
    if not 0 <= iteration < config.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {config.total_iters})")
    if iteration < config.lr_drop_iter:
        return config.lr
    return config.lr / config.lr_drop_factor


def update_ema(ema: float, batch_acc: float, coeff: float) -> float:
    return (1.0 - coeff) * ema + coeff * batch_acc


def _maps(out):
    if isinstance(out, DiscriminatorOutput):
        return out.maps()
    if isinstance(out, torch.Tensor):
        return [out]
    return list(out)


@torch.no_grad()
def discriminator_batch_accuracy(d_real, d_fake) -> float:
    """Fraction of logit cells classified correctly at sigmoid threshold 0.5.

    Cells of all scales are pooled; real and fake halves carry equal weight.
    """
    real = torch.cat([m.flatten() for m in _maps(d_real)])
    fake = torch.cat([m.flatten() for m in _maps(d_fake)])
    real_ok = (real >= 0).double().mean().item()
    fake_ok = (fake < 0).double().mean().item()
    return 0.5 * (real_ok + fake_ok)


def sample_patch(image: torch.Tensor, size: int, rng: np.random.Generator) -> torch.Tensor:
    """Uniformly placed ``size`` x ``size`` crop, shape ``[1, 3, size, size]``.

    Images whose short side is below ``size`` are first upscaled
    (bilinear) so that the short side equals ``size``.
    """
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise ShapeError(f"expected a single RGB image, got shape {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise NonFiniteError("image contains non-finite values")
    h, w = image.shape[-2:]
    short = min(h, w)
    if short < size:
        scale = size / short
        new_h = size if h == short else max(size, int(math.ceil(h * scale)))
        new_w = size if w == short else max(size, int(math.ceil(w * scale)))
        image = F.interpolate(image, size=(new_h, new_w), mode="bilinear", align_corners=False).clamp(0, 1)
        h, w = new_h, new_w
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[:, :, top:top + size, left:left + size]


def batch_for_step(step: int, config: TrainConfig, content: Sequence[torch.Tensor],
                   style: Sequence[torch.Tensor]):
    """Content and style batches for ``step``; a pure function of (seed, step)."""
    rng = np.random.default_rng([config.seed, step])
    xs, ys = [], []
    for _ in range(config.batch_size):
        xs.append(sample_patch(content[int(rng.integers(len(content)))], config.patch_size, rng))
        ys.append(sample_patch(style[int(rng.integers(len(style)))], config.patch_size, rng))
    return torch.cat(xs), torch.cat(ys)


# --------------------------------------------------------------------------
# state and step

@dataclass
class TrainState:
    iter: int
    nets: StyleTransferNetworks
    eg_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    ema_accuracy: float
    seed: int
    config_hash: str = ""


def _make_optimizers(nets, config):
    kw = dict(lr=config.lr, betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)
    return (torch.optim.Adam(nets.stylizer_parameters(), **kw),
            torch.optim.Adam(nets.discriminator_parameters(), **kw))


def new_state(config: TrainConfig, device="cpu") -> TrainState:
    nets = StyleTransferNetworks(config.network_spec(), seed=config.seed).to(device)
    eg_opt, d_opt = _make_optimizers(nets, config)
    return TrainState(0, nets, eg_opt, d_opt, config.ema_init, config.seed, config.digest())


def _image_loss(x, fake, nets, config):
    if config.image_loss == "transformed":
        return transformed_image_loss(x, fake, nets.transformer)
    if config.image_loss == "conv1":
        return conv1_feature_loss(x, fake, nets.encoder)
    return x.new_zeros(())


def _stylizer_losses(x, nets, config):
    z = nets.encoder(x)
    fake = nets.decoder(z)
    l_c = style_aware_content_loss(z, nets.encoder(fake))
    l_img = _image_loss(x, fake, nets, config)
    return fake, l_c, l_img


def training_step(state: TrainState, content: torch.Tensor, style: torch.Tensor,
                  config: TrainConfig):
    """Advance ``state`` by one iteration in place; returns ``(state, LossReport)``.

    The gate reads the EMA accuracy left by the previous step.  Losses are
    checked for finiteness before any parameter changes; a non-finite value
    raises ``NonFiniteLossError`` carrying the partial report.
    """
    if content.shape != style.shape:
        raise ShapeError(f"content {tuple(content.shape)} and style {tuple(style.shape)} batches differ")
    nets = state.nets
    lr = lr_at(state.iter, config)
    for opt in (state.eg_opt, state.d_opt):
        for group in opt.param_groups:
            group["lr"] = lr

    update_d = state.ema_accuracy < config.acc_gate
    d_params = nets.discriminator_parameters()

    if update_d:
        with torch.no_grad():
            fake, l_c, l_img = _stylizer_losses(content, nets, config)
        d_real = nets.discriminator(style)
        d_fake = nets.discriminator(fake)
        l_adv_d = adversarial_d_loss(d_real, d_fake)
        l_adv_g = adversarial_g_loss(d_fake, config.saturating_g).detach()
    else:
        fake, l_c, l_img = _stylizer_losses(content, nets, config)
        for p in d_params:
            p.requires_grad_(False)
        try:
            d_fake = nets.discriminator(fake)
            with torch.no_grad():
                d_real = nets.discriminator(style)
        finally:
            for p in d_params:
                p.requires_grad_(True)
        l_adv_g = adversarial_g_loss(d_fake, config.saturating_g)
        l_adv_d = adversarial_d_loss(d_real, d_fake).detach()

    l_c_term = l_c if config.content_loss else torch.zeros_like(l_c)
    total_eg = total_loss(l_c_term, l_img, l_adv_g, config.lam)
    batch_acc = discriminator_batch_accuracy(d_real, d_fake)
    report = LossReport(
        l_content=l_c.item(), l_transformed=l_img.item(), l_adv_d=l_adv_d.item(),
        l_adv_g=l_adv_g.item(), total_eg=total_eg.item(), lam=config.lam,
        d_accuracy_batch=batch_acc,
    )
    values = (report.l_content, report.l_transformed, report.l_adv_d, report.l_adv_g, report.total_eg)
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iter}: {report.to_dict()}", report)

    if update_d:
        state.d_opt.zero_grad(set_to_none=True)
        (-l_adv_d).backward()
        state.d_opt.step()
    else:
        state.eg_opt.zero_grad(set_to_none=True)
        total_eg.backward()
        state.eg_opt.step()

    state.ema_accuracy = update_ema(state.ema_accuracy, batch_acc, config.ema_coeff)
    state.iter += 1
    return state, report


# --------------------------------------------------------------------------
# checkpoints

def _canonical(obj):
    """Fresh containers with interned strings.

    Pickle memoises objects by identity, so two equal states can serialise
    differently when one shares a string between, say, the config and the
    optimizer's param groups and the other (freshly loaded) does not.
    Rebuilding the structure makes the bytes a function of the values only.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, OrderedDict):
        out = OrderedDict((_canonical(k), _canonical(v)) for k, v in obj.items())
        if hasattr(obj, "_metadata"):
            out._metadata = _canonical(obj._metadata)
        return out
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


def save_checkpoint(state: TrainState, config: TrainConfig, path) -> None:
    nets = state.nets
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iter": state.iter,
        "ema_accuracy": state.ema_accuracy,
        "seed": state.seed,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "network_spec": nets.spec.to_dict(),
        "encoder": nets.encoder.state_dict(),
        "decoder": nets.decoder.state_dict(),
        "transformer": nets.transformer.state_dict(),
        "discriminator": nets.discriminator.state_dict(),
        "eg_opt": state.eg_opt.state_dict(),
        "d_opt": state.d_opt.state_dict(),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(_canonical(blob), tmp)
    tmp.replace(path)


def _read_checkpoint(path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a style-transfer checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


def load_checkpoint(path, device="cpu"):
    """Returns ``(TrainState, TrainConfig)`` restored from ``path``."""
    blob = _read_checkpoint(path)
    try:
        config = TrainConfig(**blob["config"])
        nets = StyleTransferNetworks(NetworkSpec(**blob["network_spec"]))
        for name in ("encoder", "decoder", "transformer", "discriminator"):
            getattr(nets, name).load_state_dict(blob[name])
        nets.to(device)
        eg_opt, d_opt = _make_optimizers(nets, config)
        eg_opt.load_state_dict(blob["eg_opt"])
        d_opt.load_state_dict(blob["d_opt"])
    except (KeyError, RuntimeError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    state = TrainState(blob["iter"], nets, eg_opt, d_opt, blob["ema_accuracy"], blob["seed"], blob["config_hash"])
    return state, config


def load_stylizer(path, device="cpu") -> StyleTransferNetworks:
    """Networks only, in eval mode, for inference."""
    blob = _read_checkpoint(path)
    try:
        nets = StyleTransferNetworks(NetworkSpec(**blob["network_spec"]))
        for name in ("encoder", "decoder", "transformer", "discriminator"):
            getattr(nets, name).load_state_dict(blob[name])
    except (KeyError, RuntimeError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return nets.to(device).eval()


# --------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    state: TrainState
    history: List[LossReport] = field(default_factory=list)
    branches: List[str] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:07d}.pt"


def train(
    config: TrainConfig,
    content_images: Sequence[torch.Tensor],
    style_images: Sequence[torch.Tensor],
    checkpoint_dir=None,
    resume_from=None,
    on_step: Callable = None,
    device="cpu",
) -> TrainResult:
    """Run ``config.total_iters`` steps (or the remainder after ``resume_from``).

    Checkpoints are written every ``config.checkpoint_every`` iterations and
    at the end when ``checkpoint_dir`` is given.
    """
    if len(content_images) == 0:
        raise ValueError("content corpus is empty")
    if len(style_images) == 0:
        raise ValueError("style set is empty")
    if len(style_images) == 1:
        warnings.warn("training with a single style image tends to mode-collapse; "
                      "use a group of related style images", RuntimeWarning, stacklevel=2)

    if resume_from is not None:
        state, saved = load_checkpoint(resume_from, device)
        if saved.digest() != config.digest():
            raise CheckpointError(f"{resume_from}: checkpoint was written with a different config")
    else:
        state = new_state(config, device)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    result = TrainResult(state)
    state.nets.train()
    while state.iter < config.total_iters:
        x, y = batch_for_step(state.iter, config, content_images, style_images)
        x, y = x.to(device), y.to(device)
        branch = "d" if state.ema_accuracy < config.acc_gate else "eg"
        _, report = training_step(state, x, y, config)
        result.history.append(report)
        result.branches.append(branch)
        if on_step is not None:
            on_step(state, report, branch)
        if state.iter % 50 == 0:
            log.info("iter %d  branch=%s  l_c=%.5f  l_t=%.5f  l_d=%.4f  ema=%.3f",
                     state.iter, branch, report.l_content, report.l_transformed,
                     report.l_adv_d, state.ema_accuracy)
        if ckpt_dir is not None and state.iter % config.checkpoint_every == 0:
            save_checkpoint(state, config, ckpt_dir / checkpoint_name(state.iter))

    if ckpt_dir is not None:
        final = ckpt_dir / "final.pt"
        save_checkpoint(state, config, final)
        result.final_checkpoint = final
    return result
