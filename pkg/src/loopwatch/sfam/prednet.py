"""Action-conditioned predictive-coding video predictor.

Each layer ``l`` holds a target ``A``, a prediction ``A_hat``, a recurrent
representation ``R`` (convolutional LSTM) and an error representation
``E = [relu(A_hat - A), relu(A - A_hat)]``.  The steering command enters as one
constant channel tiled over the top layer and concatenated to its error input.

One call to :meth:`PredNet.step` consumes a frame and a command:

1. bottom-up: compare the frame with the current predictions, producing ``E``
   for every layer (targets of layer ``l >= 2`` come from ``E`` of layer
   ``l - 1``);
2. top-down: update ``R`` from the top layer down using those errors, the
   tiled command, and the upsampled ``R`` of the layer above, then emit the
   prediction of the *next* frame from ``R`` of layer 1.

So the prediction returned by a step is conditioned on the command passed to
that same step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConvLSTMCell(nn.Module):
    """Standard four-gate convolutional LSTM with one fused gate convolution."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel: int = 3):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels,
                               kernel, padding=kernel // 2)

    def forward(self, x, hidden):
        h, c = hidden
        i, f, o, g = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


@dataclass
class PrednetState:
    """Recurrent (h, c) and error tensors per layer, bottom layer first."""

    hidden: list[torch.Tensor]
    cell: list[torch.Tensor]
    errors: list[torch.Tensor]

    @property
    def batch_size(self) -> int:
        return self.hidden[0].shape[0]

    def expand(self, n: int) -> "PrednetState":
        """Repeat a batch-1 state ``n`` times along the batch axis."""
        rep = lambda ts: [t.expand(n, *t.shape[1:]) for t in ts]
        return PrednetState(rep(self.hidden), rep(self.cell), rep(self.errors))

    def repeat_interleave(self, n: int) -> "PrednetState":
        rep = lambda ts: [t.repeat_interleave(n, dim=0) for t in ts]
        return PrednetState(rep(self.hidden), rep(self.cell), rep(self.errors))


@dataclass
class StepTrace:
    """Per-step by-products kept for the training objective."""

    errors: list[torch.Tensor] = field(default_factory=list)


class PredNet(nn.Module):
    def __init__(self, channels=(3, 32, 48, 64), height: int = 64, width: int = 80,
                 kernel: int = 3, command_range: tuple[float, float] | None = None):
        super().__init__()
        # the tile carries the command mapped affinely so command_range spans [-1, 1]
        lo, hi = command_range if command_range is not None else (-1.0, 1.0)
        if not hi > lo:
            raise ValueError(f"command range needs lo < hi, got {command_range}")
        self.command_center = (lo + hi) / 2.0
        self.command_scale = 2.0 / (hi - lo)
        channels = tuple(int(c) for c in channels)
        n = len(channels)
        if height % 2 ** (n - 1) or width % 2 ** (n - 1):
            raise ValueError(f"input {height}x{width} not divisible by {2 ** (n - 1)}")
        self.channels = channels
        self.height, self.width = height, width
        self.n_layers = n
        pad = kernel // 2

        cells = []
        for l in range(n):
            in_ch = 2 * channels[l]
            in_ch += channels[l + 1] if l < n - 1 else 1  # R above, or the command tile
            cells.append(ConvLSTMCell(in_ch, channels[l], kernel))
        self.cells = nn.ModuleList(cells)
        self.predict = nn.ModuleList(
            nn.Conv2d(channels[l], channels[l], kernel, padding=pad) for l in range(n))
        # target convolutions exist for layers 2..n
        self.target = nn.ModuleList(
            nn.Conv2d(2 * channels[l - 1], channels[l], kernel, padding=pad)
            for l in range(1, n))
        # start the pixel prediction at mid-gray: a negative initial bias leaves a color
        # channel dead under the ReLU from the first step (the hidden state starts at zero)
        nn.init.constant_(self.predict[0].bias, 0.5)

    # -- shapes ------------------------------------------------------------
    def layer_sizes(self) -> list[tuple[int, int]]:
        return [(self.height >> l, self.width >> l) for l in range(self.n_layers)]

    def error_channels(self) -> list[int]:
        return [2 * c for c in self.channels]

    def initial_state(self, batch: int = 1, device=None, dtype=None) -> PrednetState:
        p = next(self.parameters())
        device = device or p.device
        dtype = dtype or p.dtype
        zeros = lambda c, hw: torch.zeros(batch, c, *hw, device=device, dtype=dtype)
        sizes = self.layer_sizes()
        hidden = [zeros(c, hw) for c, hw in zip(self.channels, sizes)]
        cell = [zeros(c, hw) for c, hw in zip(self.channels, sizes)]
        errors = [zeros(2 * c, hw) for c, hw in zip(self.channels, sizes)]
        return PrednetState(hidden, cell, errors)

    def command_tile(self, command: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """One constant channel holding the normalized command, shaped like the top layer."""
        b, _, h, w = like.shape
        u = (command.to(like.dtype) - self.command_center) * self.command_scale
        return u.reshape(b, 1, 1, 1).expand(b, 1, h, w)

    def prediction(self, l: int, hidden: torch.Tensor) -> torch.Tensor:
        a_hat = F.relu(self.predict[l](hidden))
        if l == 0:
            a_hat = torch.clamp(a_hat, max=1.0)  # SatLU at pixel level
        return a_hat

    # -- passes ------------------------------------------------------------
    def bottom_up(self, state: PrednetState, frame: torch.Tensor) -> PrednetState:
        """Errors of every layer for ``frame`` against the current predictions."""
        if frame.shape[1:] != (self.channels[0], self.height, self.width):
            raise ValueError(
                f"frame shape {tuple(frame.shape[1:])} does not match "
                f"{(self.channels[0], self.height, self.width)}")
        errors = []
        target = frame
        for l in range(self.n_layers):
            if l > 0:
                target = F.max_pool2d(F.relu(self.target[l - 1](errors[-1])), 2, 2)
            a_hat = self.prediction(l, state.hidden[l])
            errors.append(torch.cat([F.relu(a_hat - target), F.relu(target - a_hat)], dim=1))
        return PrednetState(state.hidden, state.cell, errors)

    def top_down(self, state: PrednetState, command: torch.Tensor):
        """Update the recurrent layers from the top; returns (state, next-frame prediction)."""
        n = self.n_layers
        hidden = [None] * n
        cell = [None] * n
        for l in reversed(range(n)):
            if l == n - 1:
                extra = self.command_tile(command, state.errors[l])
            else:
                extra = F.interpolate(hidden[l + 1], scale_factor=2, mode="nearest")
            x = torch.cat([state.errors[l], extra], dim=1)
            hidden[l], cell[l] = self.cells[l](x, (state.hidden[l], state.cell[l]))
        new_state = PrednetState(hidden, cell, state.errors)
        return new_state, self.prediction(0, hidden[0])

    def step(self, state: PrednetState, frame: torch.Tensor, command: torch.Tensor):
        state = self.bottom_up(state, frame)
        return self.top_down(state, command)

    # -- rollouts ----------------------------------------------------------
    def rollout(self, frames: torch.Tensor, commands: torch.Tensor,
                trace: StepTrace | None = None) -> torch.Tensor:
        """Predict the frame after ``frames`` from a zero state.

        ``frames``: (B, T, C, H, W), ``commands``: (B, T).  Step ``k`` feeds
        frame ``k`` and command ``k``; the prediction of the final step is
        returned, shape (B, C, H, W).
        """
        if frames.ndim != 5 or commands.ndim != 2 or frames.shape[:2] != commands.shape:
            raise ValueError(
                f"frames {tuple(frames.shape)} and commands {tuple(commands.shape)} "
                "must be (B, T, C, H, W) and (B, T)")
        state = self.initial_state(frames.shape[0], frames.device, frames.dtype)
        pred = None
        for k in range(frames.shape[1]):
            state = self.bottom_up(state, frames[:, k])
            if trace is not None:
                trace.errors.append(state.errors)
            state, pred = self.top_down(state, commands[:, k])
        return pred

    def prefix_state(self, frames: torch.Tensor, commands: torch.Tensor) -> PrednetState:
        """State after all frames and all but the last command.

        ``frames``: (B, T, C, H, W), ``commands``: (B, T - 1).  The returned
        state has seen the final frame bottom-up and awaits the final command.
        """
        state = self.initial_state(frames.shape[0], frames.device, frames.dtype)
        t = frames.shape[1]
        for k in range(t):
            state = self.bottom_up(state, frames[:, k])
            if k < t - 1:
                state, _ = self.top_down(state, commands[:, k])
        return state
