"""Two-stage SFAM training: error/SSIM minimization, then adversarial refinement."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import TrainingDivergedError
from .model import ActionCritic, SfamConfig, stage1_loss, stage2_losses
from .prednet import PredNet, StepTrace

log = logging.getLogger(__name__)


@dataclass
class SfamLog:
    stage1: list[float] = field(default_factory=list)
    stage2_critic: list[float] = field(default_factory=list)
    stage2_gen: list[float] = field(default_factory=list)
    stage2_total: list[float] = field(default_factory=list)
    critic_accuracy: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(stage1=self.stage1, stage2_critic=self.stage2_critic,
                    stage2_gen=self.stage2_gen, stage2_total=self.stage2_total,
                    critic_accuracy=self.critic_accuracy)


def stack_windows(windows, dtype=torch.float32):
    """Tensors (frames (B,4,C,H,W), commands (B,4), targets (B,C,H,W))."""
    frames = torch.from_numpy(np.stack([w.frames for w in windows])).to(dtype)
    commands = torch.from_numpy(np.stack([w.commands for w in windows])).to(dtype)
    targets = torch.from_numpy(np.stack([w.target for w in windows])).to(dtype)
    return frames, commands, targets


def _check(values: dict, stage: str, epoch: int, batch: int):
    if not all(math.isfinite(v) for v in values.values()):
        desc = ", ".join(f"{k}={v}" for k, v in values.items())
        raise TrainingDivergedError(f"non-finite {stage} loss at epoch {epoch}, batch {batch}: "
                                    f"{desc}", batch_index=batch, losses=values)


def _epoch_batches(n: int, config: SfamConfig, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    if config.windows_per_epoch:
        order = order[:config.windows_per_epoch]
    bs = min(config.batch_size, len(order))
    return [order[i:i + bs] for i in range(0, len(order) - bs + 1, bs)]


def stage1_step(predictor: PredNet, frames, commands, targets, config: SfamConfig):
    trace = StepTrace()
    pred = predictor.rollout(frames, commands, trace)
    return stage1_loss(pred, targets, frames[:, -1], trace.errors, config), pred


def train_sfam(windows, config: SfamConfig | None = None, seed: int | None = None,
               predictor: PredNet | None = None, critic: ActionCritic | None = None):
    """Train the video predictor (stage 1) and refine it adversarially (stage 2).

    Returns ``(predictor, critic, log)``.  During stage 2 the predictor update
    minimizes the stage-1 objective plus ``adversarial_weight`` times the
    adversarial generator loss, whose two term weights are redrawn uniformly
    from (0, 1) at every update.
    """
    config = config or SfamConfig()
    seed = config.seed if seed is None else seed
    if len(windows) == 0:
        raise ValueError("no training windows")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    predictor = predictor or config.build_predictor()
    critic = critic or ActionCritic(config)
    grid = config.grid
    history = SfamLog()
    frames_all, commands_all, targets_all = stack_windows(windows)

    opt = torch.optim.Adam(predictor.parameters(), lr=config.learning_rate)
    predictor.train()
    for epoch in range(config.epochs_stage1):
        losses = []
        for b, idx in enumerate(_epoch_batches(len(windows), config, gen)):
            loss, _ = stage1_step(predictor, frames_all[idx], commands_all[idx],
                                  targets_all[idx], config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check({"stage1": loss.item()}, "stage-1", epoch, b)
            losses.append(loss.item())
        history.stage1.append(float(np.mean(losses)))
        log.info("sfam stage 1 epoch %d: loss=%.4f", epoch, history.stage1[-1])

    opt_g = torch.optim.Adam(predictor.parameters(), lr=config.gen_learning_rate,
                             betas=(0.5, 0.999))
    opt_c = torch.optim.Adam(critic.parameters(), lr=config.critic_learning_rate,
                             betas=(0.5, 0.999))
    critic.train()
    for epoch in range(config.epochs_stage2):
        sums = np.zeros(4)
        count = 0
        correct = total = 0
        for b, idx in enumerate(_epoch_batches(len(windows), config, gen)):
            frames, commands, targets = frames_all[idx], commands_all[idx], targets_all[idx]
            w1, w2 = torch.rand(2, generator=gen).tolist()
            recon, pred = stage1_step(predictor, frames, commands, targets, config)
            loss_c, loss_g = stage2_losses(frames, commands, targets, predictor, critic, grid,
                                           w1, w2, pred=pred)
            total_g = recon + config.adversarial_weight * loss_g
            # both backward passes before any step: the generator graph holds critic weights
            opt_c.zero_grad()
            opt_g.zero_grad()
            loss_c.backward()
            total_g.backward()
            opt_c.step()
            opt_g.step()
            _check({"critic": loss_c.item(), "generator": loss_g.item()}, "stage-2", epoch, b)

            with torch.no_grad():
                real_fake = critic(targets).argmax(1) != critic.fake_index
                fake_fake = critic(pred.detach()).argmax(1) == critic.fake_index
                correct += int(real_fake.sum() + fake_fake.sum())
                total += 2 * len(idx)
            sums += (loss_c.item(), loss_g.item(), total_g.item(), 0.0)
            count += 1
        means = sums / max(count, 1)
        history.stage2_critic.append(float(means[0]))
        history.stage2_gen.append(float(means[1]))
        history.stage2_total.append(float(means[2]))
        history.critic_accuracy.append(correct / max(total, 1))
        log.info("sfam stage 2 epoch %d: critic=%.4f gen=%.4f total=%.4f acc=%.3f",
                 epoch, means[0], means[1], means[2], history.critic_accuracy[-1])
    predictor.eval()
    critic.eval()
    return predictor, critic, history

