"""Controller-focused anomaly monitor: an image-conditioned energy-based GAN.

The discriminator embeds the steering command, adds it to the image feature
vector and maps the sum through one hidden layer to a single Tanh neuron,
read as the image-driven steering prediction ``p``.  The energy is
``(u - p)^2``.  The generator predicts a steering command from the image and
a uniform noise vector and only serves to produce contrastive samples.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._torch import evaluating, frozen
from .errors import ConfigError, TrainingDivergedError
from .metrics import ActionGrid, argmin_lowest

log = logging.getLogger(__name__)


@dataclass
class CfamConfig:
    image_size: int = 64
    conv_channels: tuple = (8, 16, 32, 64, 128, 256)
    kernel: int = 4
    stride: int = 2
    leaky_slope: float = 0.2
    noise_dim: int = 100
    margin: float = 1.0
    hidden_dim: int = 512
    learning_rate: float = 2e-4
    batch_size: int = 32
    epochs: int = 20
    # final learning rate as a fraction of the initial one (linear decay per batch)
    lr_final: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.image_size % (2 ** len(self.conv_channels)):
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"2^{len(self.conv_channels)}")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if not 0 < self.lr_final <= 1:
            raise ConfigError("lr_final must lie in (0, 1]")

    @property
    def feature_dim(self) -> int:
        side = self.image_size // 2 ** len(self.conv_channels)
        return self.conv_channels[-1] * side * side


class ImageEncoder(nn.Module):
    """Strided 4x4 convolutions; batch norm before every convolution but the first."""

    def __init__(self, config: CfamConfig):
        super().__init__()
        layers = []
        in_ch = 3
        for i, out_ch in enumerate(config.conv_channels):
            if i > 0:
                layers.append(nn.BatchNorm2d(in_ch))
            layers.append(nn.Conv2d(in_ch, out_ch, config.kernel, config.stride,
                                    padding=(config.kernel - config.stride) // 2))
            layers.append(nn.LeakyReLU(config.leaky_slope))
            in_ch = out_ch
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).flatten(1)


class _Head(nn.Module):
    def __init__(self, config: CfamConfig):
        super().__init__()
        self.hidden = nn.Linear(config.feature_dim, config.hidden_dim)
        self.out = nn.Linear(config.hidden_dim, 1)
        self.slope = config.leaky_slope

    def forward(self, h):
        return torch.tanh(self.out(F.leaky_relu(self.hidden(h), self.slope))).squeeze(1)


class Generator(nn.Module):
    def __init__(self, config: CfamConfig):
        super().__init__()
        self.config = config
        self.encoder = ImageEncoder(config)
        self.noise = nn.Linear(config.noise_dim, config.feature_dim)
        self.head = _Head(config)

    def forward(self, z, x):
        return self.head(self.encoder(x) + F.leaky_relu(self.noise(z), self.config.leaky_slope))


class Discriminator(nn.Module):
    def __init__(self, config: CfamConfig):
        super().__init__()
        self.config = config
        self.encoder = ImageEncoder(config)
        self.command = nn.Linear(1, config.feature_dim)
        self.head = _Head(config)

    def prediction(self, u, x):
        """The condition-driven steering prediction ``p(u, x)``."""
        return self.head(self.encoder(x) + self.command(u.reshape(-1, 1).to(x.dtype)))

    def forward(self, u, x):
        u = u.to(x.dtype)
        return (u - self.prediction(u, x)) ** 2


class Cebgan(nn.Module):
    """Generator/discriminator pair with its config (the trained CFAM parameters)."""

    def __init__(self, config: CfamConfig | None = None):
        super().__init__()
        self.config = config or CfamConfig()
        self.generator = Generator(self.config)
        self.discriminator = Discriminator(self.config)


def _check_images(x: torch.Tensor, config: CfamConfig) -> torch.Tensor:
    if x.ndim == 3:
        x = x[None]
    s = config.image_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
        raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(x.shape)}")
    return x


def _as_tensor(a, like: torch.nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    return torch.as_tensor(a, device=p.device).to(p.dtype)


def generator_forward(z, x, model: Cebgan) -> torch.Tensor:
    """Generated steering in (-1, 1); batched over the leading axis."""
    x = _check_images(_as_tensor(x, model), model.config)
    z = _as_tensor(z, model).reshape(x.shape[0], -1)
    if z.shape[1] != model.config.noise_dim:
        raise ValueError(f"noise must have {model.config.noise_dim} entries, got {z.shape[1]}")
    return model.generator(z, x)


def discriminator_energy(u, x, model: Cebgan) -> torch.Tensor:
    """Energy ``(u - p(u, x))^2`` per batch element."""
    x = _check_images(_as_tensor(x, model), model.config)
    u = _as_tensor(u, model).reshape(-1)
    if u.shape[0] != x.shape[0]:
        raise ValueError(f"{u.shape[0]} commands for {x.shape[0]} images")
    return model.discriminator(u, x)


def hinge_losses(real_energy, fake_energy_d, fake_energy_g, margin: float):
    """Mean ``L_D = D(u,x) + [m - D(G(z),x)]^+`` and ``L_G = D(G(z),x)``.

    ``fake_energy_d`` must carry no generator graph and ``fake_energy_g`` no
    discriminator parameter graph.
    """
    loss_d = (real_energy + F.relu(margin - fake_energy_d)).mean()
    loss_g = fake_energy_g.mean()
    return loss_d, loss_g


def cebgan_losses(u, z, x, model: Cebgan, margin: float | None = None):
    """Discriminator and generator losses for a batch (means over the batch)."""
    m = model.config.margin if margin is None else margin
    if m <= 0:
        raise ValueError("margin must be positive")
    x = _check_images(_as_tensor(x, model), model.config)
    u = _as_tensor(u, model).reshape(-1)
    fake = generator_forward(z, x, model)
    disc = model.discriminator
    real_energy = disc(u, x)
    fake_energy_d = disc(fake.detach(), x)
    with frozen(disc):
        fake_energy_g = disc(fake, x)
    return hinge_losses(real_energy, fake_energy_d, fake_energy_g, m)


@dataclass
class CfamLog:
    loss_d: list[float] = field(default_factory=list)
    loss_g: list[float] = field(default_factory=list)
    real_energy: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"loss_d": self.loss_d, "loss_g": self.loss_g, "real_energy": self.real_energy}


def _stack_pairs(pairs, image_size: int):
    frames = np.stack([np.asarray(f, dtype=np.float32) for f, _ in pairs])
    u = np.array([float(c) for _, c in pairs], dtype=np.float32)
    x = torch.from_numpy(frames)
    if x.shape[-2:] != (image_size, image_size):
        x = resize_frames(x, (image_size, image_size))
    return x, torch.from_numpy(u)


def resize_frames(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear (antialiased) resize of a (B, 3, H, W) batch, clamped to [0, 1]."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False,
                         antialias=True).clamp(0.0, 1.0)


def train_cfam(pairs, config: CfamConfig | None = None, seed: int | None = None,
               model: Cebgan | None = None) -> tuple[Cebgan, CfamLog]:
    """Alternating discriminator/generator Adam updates over (frame, steering) pairs.

    Frames of another size are resized to ``config.image_size``.
    """
    config = config or CfamConfig()
    seed = config.seed if seed is None else seed
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = model or Cebgan(config)
    model.train()
    x_all, u_all = _stack_pairs(pairs, config.image_size)
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=config.learning_rate,
                             betas=(0.5, 0.999))
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=config.learning_rate,
                             betas=(0.5, 0.999))
    history = CfamLog()
    n = len(u_all)
    bs = min(config.batch_size, n)
    total = max(config.epochs * (n // bs) - 1, 1)
    decay = lambda step: 1.0 - (1.0 - config.lr_final) * min(step / total, 1.0)
    schedules = [torch.optim.lr_scheduler.LambdaLR(o, decay) for o in (opt_d, opt_g)]
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        batches = 0
        for b, start in enumerate(range(0, n - bs + 1, bs)):
            idx = order[start:start + bs]
            x, u = x_all[idx], u_all[idx]
            z = torch.rand(len(idx), config.noise_dim, generator=gen)

            loss_d, _ = cebgan_losses(u, z, x, model)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            _, loss_g = cebgan_losses(u, z, x, model)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            for sched in schedules:
                sched.step()

            with torch.no_grad():
                real = model.discriminator(u, x).mean()
            values = (loss_d.item(), loss_g.item(), real.item())
            if not all(math.isfinite(v) for v in values):
                raise TrainingDivergedError(
                    f"non-finite CFAM loss at epoch {epoch}, batch {b}: "
                    f"L_D={values[0]}, L_G={values[1]}",
                    batch_index=b, losses={"loss_d": values[0], "loss_g": values[1]})
            sums += values
            batches += 1
        means = sums / max(batches, 1)
        history.loss_d.append(float(means[0]))
        history.loss_g.append(float(means[1]))
        history.real_energy.append(float(means[2]))
        log.info("cfam epoch %d: L_D=%.4f L_G=%.4f E_real=%.4f", epoch, *means)
    model.eval()
    return model, history


@dataclass
class EnergyProfile:
    grid: ActionGrid
    energies: np.ndarray

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=np.float64)
        if len(self.energies) != self.grid.n:
            raise ValueError(f"{len(self.energies)} energies for a grid of {self.grid.n}")

    @property
    def best_action(self) -> float:
        return float(self.grid.values[argmin_lowest(self.energies)])


def energy_sweep(x, grid: ActionGrid, model: Cebgan) -> EnergyProfile:
    """Energies of every grid command for one frame, evaluated as one batch."""
    return energy_sweeps(_as_tensor(x, model)[None], grid, model)[0]


def energy_sweeps(frames, grid: ActionGrid, model: Cebgan) -> list[EnergyProfile]:
    """Batched :func:`energy_sweep` over frames (B, 3, S, S)."""
    x = _check_images(_as_tensor(frames, model), model.config)
    b, n = x.shape[0], grid.n
    values = _as_tensor(grid.values, model)
    with torch.no_grad(), evaluating(model):
        disc = model.discriminator
        feats = disc.encoder(x)                                   # encode each image once
        h = feats.repeat_interleave(n, dim=0) + disc.command(values.repeat(b).reshape(-1, 1))
        p = disc.head(h)
        energies = ((values.repeat(b) - p) ** 2).reshape(b, n)
    return [EnergyProfile(grid, e.double().numpy()) for e in energies]


def cfam_deviation(u_actual: float, profile: EnergyProfile) -> float:
    """|u - argmin-energy command|, ties toward the lower grid index."""
    return abs(float(u_actual) - profile.best_action)
