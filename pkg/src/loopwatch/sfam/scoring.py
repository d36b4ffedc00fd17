"""Action-conditioned prediction and dissimilarity scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .._torch import evaluating
from ..metrics import ActionGrid, argmin_lowest, batch_ssim
from .prednet import PredNet


def _tensor(a, model: PredNet) -> torch.Tensor:
    return torch.as_tensor(a).to(next(model.parameters()).dtype)


def rollout_predict(frames, commands, model: PredNet) -> torch.Tensor:
    """Predict x[t+1] from frames x[t-3..t] and commands u[t-2..t+1].

    Unbatched (4, C, H, W) / (4,) inputs give a (C, H, W) prediction; batched
    (B, 4, C, H, W) / (B, 4) inputs give (B, C, H, W).
    """
    f, c = _tensor(frames, model), _tensor(commands, model)
    single = f.ndim == 4
    if single:
        f, c = f[None], c.reshape(1, -1)
    if f.shape[1] != 4 or c.shape[1] != 4:
        raise ValueError(f"need exactly 4 frames and 4 commands, got {f.shape[1]} and {c.shape[1]}")
    with torch.no_grad(), evaluating(model):
        out = model.rollout(f, c)
    return out[0] if single else out


def conditioned_predictions_batch(frames, commands, grid: ActionGrid, model: PredNet,
                                  chunk: int = 240) -> torch.Tensor:
    """Predictions of x[t+1] for every grid command, shape (B, N, C, H, W).

    ``frames``: (B, 4, C, H, W); ``commands``: (B, 3) holding u[t-2..t].  The
    state after the shared prefix is computed once and only the final
    top-down pass is branched.
    """
    f, c = _tensor(frames, model), _tensor(commands, model)
    if f.ndim != 5 or f.shape[1] != 4 or c.shape != (f.shape[0], 3):
        raise ValueError(f"need frames (B, 4, C, H, W) and commands (B, 3), got "
                         f"{tuple(f.shape)} and {tuple(c.shape)}")
    b, n = f.shape[0], grid.n
    values = _tensor(grid.values, model)
    with torch.no_grad(), evaluating(model):
        state = model.prefix_state(f, c).repeat_interleave(n)
        branch = values.repeat(b)
        outs = []
        for start in range(0, b * n, chunk):
            sl = slice(start, start + chunk)
            sub = type(state)([h[sl] for h in state.hidden], [s[sl] for s in state.cell],
                              [e[sl] for e in state.errors])
            outs.append(model.top_down(sub, branch[sl])[1])
    return torch.cat(outs).reshape(b, n, *f.shape[2:])


def conditioned_predictions(frames, commands, grid: ActionGrid, model: PredNet) -> torch.Tensor:
    """N predictions (N, C, H, W) for one window of 4 frames and 3 past commands."""
    f, c = _tensor(frames, model), _tensor(commands, model)
    if f.ndim != 4 or f.shape[0] != 4 or c.numel() != 3:
        raise ValueError("need 4 frames and 3 past commands")
    return conditioned_predictions_batch(f[None], c.reshape(1, 3), grid, model)[0]


@dataclass
class DissimilarityProfile:
    grid: ActionGrid
    dssims: np.ndarray

    def __post_init__(self):
        self.dssims = np.asarray(self.dssims, dtype=np.float64)
        if len(self.dssims) != self.grid.n:
            raise ValueError(f"{len(self.dssims)} dissimilarities for a grid of {self.grid.n}")

    @property
    def best_action(self) -> float:
        return float(self.grid.values[argmin_lowest(self.dssims)])


def dissimilarity_profile(predictions, actual_next, grid: ActionGrid,
                          kernel: int = 5) -> DissimilarityProfile:
    """DSSIM of each of the N predictions against the observed next frame."""
    p = torch.as_tensor(predictions)
    a = torch.as_tensor(actual_next).to(p.dtype)
    if tuple(p.shape[1:]) != tuple(a.shape):
        raise ValueError(f"prediction shape {tuple(p.shape[1:])} != frame shape {tuple(a.shape)}")
    with torch.no_grad():
        s = batch_ssim(p, a.expand_as(p), kernel)
    return DissimilarityProfile(grid, ((1.0 - s) / 2.0).double().numpy())


def sfam_deviation(profile: DissimilarityProfile, u_actual: float) -> float:
    """|u - least-dissimilar grid command|, ties toward the lower index."""
    return abs(float(u_actual) - profile.best_action)
