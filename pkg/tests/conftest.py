import copy
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from loopwatch.cfam import CfamConfig, resize_frames, train_cfam
from loopwatch.dataio import WorldConfig, make_windows, simulate_episode
from loopwatch.sfam import SfamConfig, train_sfam


@pytest.fixture(scope="session")
def trained():
    """Small models trained once per session on a few corridor episodes.

    Used by tests that check learned behavior rather than arithmetic.
    """
    world = WorldConfig()
    train_eps = [simulate_episode(world, s, 200) for s in (100, 101, 102, 103)]
    held_out = simulate_episode(world, 104, 200)

    cfam_cfg = CfamConfig(epochs=8, lr_final=0.05)
    pairs = [(f, u) for ep in train_eps for f, u in zip(ep.frames, ep.steering)]
    cfam, cfam_log = train_cfam(pairs, cfam_cfg, seed=0)
    s = cfam_cfg.image_size
    cfam_eval = (resize_frames(torch.from_numpy(held_out.frames), (s, s)),
                 torch.from_numpy(held_out.steering).float())

    sfam_cfg = SfamConfig(epochs_stage1=3, epochs_stage2=0, windows_per_epoch=240)
    windows = [w for ep in train_eps for w in make_windows(ep)]
    stage1, _, log1 = train_sfam(windows, sfam_cfg, seed=0)
    stage2_cfg = SfamConfig(epochs_stage1=0, epochs_stage2=1, windows_per_epoch=96)
    stage2, critic, log2 = train_sfam(windows, stage2_cfg, seed=1,
                                      predictor=copy.deepcopy(stage1))
    return SimpleNamespace(world=world, held_out=held_out, grid=sfam_cfg.grid,
                           cfam=cfam, cfam_log=cfam_log, cfam_eval=cfam_eval,
                           sfam_config=sfam_cfg, stage1=stage1, stage1_log=log1,
                           stage2=stage2, critic=critic, stage2_log=log2,
                           held_windows=make_windows(held_out)[::4])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
