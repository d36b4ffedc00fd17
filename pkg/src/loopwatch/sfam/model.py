"""SFAM configuration, action critic, and the two training objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from ..errors import ConfigError
from .._torch import frozen
from ..metrics import ActionGrid, batch_ssim, make_action_grid, nearest_action_index
from .prednet import PredNet


@dataclass
class SfamConfig:
    height: int = 64
    width: int = 80
    channels: tuple = (3, 32, 48, 64)
    kernel: int = 3
    grid_lo: float = -0.24
    grid_hi: float = 0.28
    grid_n: int = 15
    ssim_kernel: int = 5
    lambda_err: float = 0.1
    lambda_ssim: float = 1.0
    lambda_prev: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs_stage1: int = 10
    epochs_stage2: int = 2
    windows_per_epoch: int = 0          # 0 = every window each epoch
    critic_channels: tuple = (32, 32, 64, 64, 128, 128, 256, 256, 256)
    critic_slope: float = 0.1
    critic_learning_rate: float = 2e-4
    gen_learning_rate: float = 1e-4
    adversarial_weight: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.critic_channels = tuple(int(c) for c in self.critic_channels)
        depth = len(self.channels) - 1
        if self.height % 2 ** depth or self.width % 2 ** depth:
            raise ConfigError(f"input {self.height}x{self.width} not divisible by {2 ** depth}")
        if min(self.lambda_err, self.lambda_ssim, self.lambda_prev) < 0:
            raise ConfigError("loss weights must be non-negative")
        if len(self.critic_channels) != 9:
            raise ConfigError("the critic has nine convolution layers")
        make_action_grid(self.grid_lo, self.grid_hi, self.grid_n)

    @property
    def grid(self) -> ActionGrid:
        return make_action_grid(self.grid_lo, self.grid_hi, self.grid_n)

    def build_predictor(self) -> PredNet:
        return PredNet(self.channels, self.height, self.width, self.kernel,
                       (self.grid_lo, self.grid_hi))


class ActionCritic(nn.Module):
    """Nine spectrally normalized convolutions and an N+1-way linear head.

    Kernels alternate 3x3/stride 1 and 4x4/stride 2.  Logits ``0..N-1`` score
    the action classes; logit ``N`` is the fake class.
    """

    def __init__(self, config: SfamConfig):
        super().__init__()
        self.n_actions = config.grid_n
        self.slope = config.critic_slope
        convs = []
        in_ch = config.channels[0]
        h, w = config.height, config.width
        for i, out_ch in enumerate(config.critic_channels):
            if i % 2 == 0:
                conv = nn.Conv2d(in_ch, out_ch, 3, 1, padding=1)
            else:
                conv = nn.Conv2d(in_ch, out_ch, 4, 2, padding=1)
                h, w = h // 2, w // 2
            convs.append(spectral_norm(conv))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.head = spectral_norm(nn.Linear(in_ch * h * w, config.grid_n + 1))
        self.input_shape = (config.channels[0], config.height, config.width)

    @property
    def fake_index(self) -> int:
        return self.n_actions

    def forward(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"critic expects (B, {self.input_shape}), got {tuple(x.shape)}")
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
        return self.head(x.flatten(1))

    def normalized_weights(self) -> list[torch.Tensor]:
        return [m.weight for m in list(self.convs) + [self.head]]


def critic_logits(frame, critic: ActionCritic) -> torch.Tensor:
    """Logits (N+1,) for one frame, or (B, N+1) for a batch."""
    x = torch.as_tensor(frame).to(next(critic.parameters()).dtype)
    single = x.ndim == 3
    out = critic(x[None] if single else x)
    return out[0] if single else out


def kl_uniform(action_probs, validate: bool = True):
    """KL(U || p) over the action classes, with ``p`` clamped below at 1e-12.

    Accepts a (N,) or (B, N) array/tensor; returns a float for NumPy input and
    a tensor (per row) otherwise.
    """
    is_numpy = not isinstance(action_probs, torch.Tensor)
    p = torch.as_tensor(np.asarray(action_probs, dtype=np.float64) if is_numpy else action_probs)
    if validate:
        with torch.no_grad():
            if torch.any(p < 0) or torch.any(~torch.isfinite(p)):
                raise ValueError("probabilities must be finite and non-negative")
            if torch.any((p.sum(-1) - 1).abs() > 1e-6):
                raise ValueError("probabilities must sum to 1")
    n = p.shape[-1]
    kl = (torch.log(torch.tensor(1.0 / n, dtype=p.dtype)) - torch.log(p.clamp_min(1e-12))).sum(-1) / n
    return float(kl) if is_numpy and kl.ndim == 0 else kl


def stage1_loss(pred, x_next, x_prev, error_reps, config: SfamConfig | None = None):
    """Weighted error/SSIM objective for a batch of (B, C, H, W) tensors.

    ``error_reps`` is an iterable of per-step lists of error tensors; the error
    term is the mean over every error entry of every layer and step.
    """
    cfg = config or SfamConfig()
    flat = [e.flatten(1) for step in error_reps for e in step]
    err = torch.cat(flat, dim=1).mean() if flat else pred.new_zeros(())
    ssim_next = batch_ssim(pred, x_next, cfg.ssim_kernel).mean()
    ssim_prev = batch_ssim(pred, x_prev, cfg.ssim_kernel).mean()
    return cfg.lambda_err * err - cfg.lambda_ssim * ssim_next + cfg.lambda_prev * ssim_prev


def action_labels(commands, grid: ActionGrid) -> torch.Tensor:
    return torch.tensor([nearest_action_index(float(u), grid) for u in commands],
                        dtype=torch.long)


def stage2_terms(real_logits, fake_logits_detached, fake_logits, labels, fake_index: int,
                 w1: float, w2: float):
    """Critic and generator losses from logits (see :func:`stage2_losses`)."""
    fake_labels = torch.full_like(labels, fake_index)
    loss_critic = (F.cross_entropy(real_logits, labels)
                   + F.cross_entropy(fake_logits_detached, fake_labels))
    action_probs = F.softmax(fake_logits[:, :fake_index], dim=1)
    kl = kl_uniform(action_probs, validate=False).mean()
    loss_gen = w1 * F.cross_entropy(fake_logits, labels) + w2 * kl
    return loss_critic, loss_gen


def stage2_losses(frames, commands, targets, predictor: PredNet, critic: ActionCritic,
                  grid: ActionGrid, w1: float, w2: float, pred: torch.Tensor | None = None):
    """Adversarial losses for a batch of windows.

    ``L_critic`` = CE(real frame -> action label) + CE(prediction -> fake);
    ``L_gen`` = w1 * CE(prediction -> its commanded action) + w2 * KL(U || action
    posterior of the prediction).  The generator term reaches the predictor only
    through the prediction; the critic term does not reach the predictor.
    """
    if pred is None:
        pred = predictor.rollout(frames, commands)
    labels = action_labels(commands[:, -1], grid)
    real_logits = critic(targets)
    fake_d = critic(pred.detach())
    with frozen(critic):
        fake_g = critic(pred)
    return stage2_terms(real_logits, fake_d, fake_g, labels, critic.fake_index, w1, w2)
