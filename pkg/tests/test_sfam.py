import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from loopwatch.metrics import batch_ssim, dssim, make_action_grid, ssim
from loopwatch.sfam import (ActionCritic, DissimilarityProfile, PredNet, SfamConfig, StepTrace,
                            action_labels, conditioned_predictions,
                            conditioned_predictions_batch, critic_logits, dissimilarity_profile,
                            kl_uniform, rollout_predict, sfam_deviation, stage1_loss,
                            stage2_losses, train_sfam)
from loopwatch.sfam.model import stage2_terms
from loopwatch.dataio import TrainingWindow
from oracles import central_difference, kl_uniform_sum, relative_error

TINY = SfamConfig(height=16, width=16, channels=(3, 4, 6, 8), batch_size=4,
                  critic_channels=(4,) * 9, epochs_stage1=1, epochs_stage2=1)


@pytest.mark.parametrize("h,w", [(120, 160), (64, 80)])
def test_shape_suite(h, w):
    cfg = SfamConfig(height=h, width=w)
    net = cfg.build_predictor()
    assert list(net.channels) == [3, 32, 48, 64]
    assert net.error_channels() == [6, 64, 96, 128]
    assert net.layer_sizes() == [(h, w), (h // 2, w // 2), (h // 4, w // 4), (h // 8, w // 8)]
    state = net.initial_state(1)
    with torch.no_grad():
        state = net.bottom_up(state, torch.rand(1, 3, h, w))
        assert [tuple(e.shape[1:]) for e in state.errors] == [
            (c, hh, ww) for c, (hh, ww) in zip([6, 64, 96, 128], net.layer_sizes())]
        tile = net.command_tile(torch.tensor([0.1]), state.errors[-1])
        assert tuple(tile.shape[1:]) == (1, h // 8, w // 8)
        _, pred = net.top_down(state, torch.tensor([0.1]))
    assert tuple(pred.shape) == (1, 3, h, w)
    critic = ActionCritic(cfg)
    with torch.no_grad():
        assert critic_logits(torch.rand(3, h, w), critic).shape == (16,)


def test_config_invariants():
    with pytest.raises(ValueError):
        SfamConfig(height=60, width=80)
    with pytest.raises(ValueError):
        SfamConfig(lambda_err=-0.1)
    with pytest.raises(ValueError):
        SfamConfig(critic_channels=(8,) * 8)


def test_first_step_from_zero_state():
    torch.manual_seed(0)
    net = TINY.build_predictor()
    state = net.initial_state(2)
    assert all(torch.all(e == 0) for e in state.errors)
    with torch.no_grad():
        new_state, pred = net.step(state, torch.rand(2, 3, 16, 16), torch.tensor([0.1, -0.1]))
    assert torch.isfinite(pred).all()
    assert pred.min() >= 0 and pred.max() <= 1
    assert all(torch.all(e >= 0) for e in new_state.errors)


def test_step_is_deterministic_and_errors_vanish_on_match():
    torch.manual_seed(1)
    net = TINY.build_predictor()
    frame = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        a = net.step(net.initial_state(1), frame, torch.tensor([0.05]))[1]
        b = net.step(net.initial_state(1), frame, torch.tensor([0.05]))[1]
        assert torch.equal(a, b)
        # feed the model its own prediction: the pixel-level error is exactly zero
        state, pred = net.step(net.initial_state(1), frame, torch.tensor([0.05]))
        state = net.bottom_up(state, pred)
    assert torch.all(state.errors[0] == 0)


def test_frame_shape_is_checked():
    net = TINY.build_predictor()
    with pytest.raises(ValueError):
        net.bottom_up(net.initial_state(1), torch.rand(1, 3, 16, 8))


def test_rollout_predict_shapes_and_counts():
    net = TINY.build_predictor()
    out = rollout_predict(torch.rand(4, 3, 16, 16), torch.zeros(4), net)
    assert out.shape == (3, 16, 16)
    assert out.min() >= 0 and out.max() <= 1
    batch = rollout_predict(torch.rand(2, 4, 3, 16, 16), torch.zeros(2, 4), net)
    assert batch.shape == (2, 3, 16, 16)
    with pytest.raises(ValueError):
        rollout_predict(torch.rand(3, 3, 16, 16), torch.zeros(3), net)
    with pytest.raises(ValueError):
        rollout_predict(torch.rand(4, 3, 16, 16), torch.zeros(5), net)


# -- stage-1 objective -------------------------------------------------------------

def test_stage1_loss_substitution():
    rng = np.random.default_rng(0)
    x_next = torch.from_numpy(rng.random((1, 3, 16, 16)))
    x_prev = torch.from_numpy(rng.random((1, 3, 16, 16)))
    zeros = [[torch.zeros(1, 6, 16, 16, dtype=torch.float64)]]
    s = ssim(x_next[0].numpy(), x_prev[0].numpy(), 5)
    loss = stage1_loss(x_next, x_next, x_prev, zeros)
    assert abs(float(loss) - (-1 + 0.5 * s)) < 1e-9
    loss = stage1_loss(x_next, x_next, x_next, zeros)
    assert abs(float(loss) - (-0.5)) < 1e-9


def test_stage1_loss_increases_with_errors():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    y = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    e = torch.zeros(1, 6, 16, 16, dtype=torch.float64)
    base = float(stage1_loss(x, y, y, [[e]]))
    e2 = e.clone()
    e2[0, 2, 3, 4] = 0.5
    assert float(stage1_loss(x, y, y, [[e2]])) > base


def test_stage1_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = PredNet((3, 4), 16, 16).double()
    cfg = SfamConfig(height=16, width=16, channels=(3, 4))
    g = torch.Generator().manual_seed(0)
    frames = torch.rand(2, 4, 3, 16, 16, generator=g, dtype=torch.float64)
    commands = torch.rand(2, 4, generator=g, dtype=torch.float64) * 0.4 - 0.2
    target = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)

    def loss():
        trace = StepTrace()
        pred = net.rollout(frames, commands, trace)
        return stage1_loss(pred, target, frames[:, -1], trace.errors, cfg)

    params = list(net.parameters())
    net.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.ravel() for p in params])
    numeric = torch.cat([n.ravel() for n in central_difference(loss, params)])
    assert relative_error(analytic, numeric) < 1e-4


# -- critic and stage-2 objective ---------------------------------------------------

def _power_iterate(critic, steps=25):
    critic.train()
    with torch.no_grad():
        for _ in range(steps):
            critic(torch.rand(1, *critic.input_shape))
    critic.eval()


def test_spectral_norms_against_svd_oracle():
    torch.manual_seed(0)
    critic = ActionCritic(SfamConfig())
    _power_iterate(critic, 25)
    with torch.no_grad():
        for w in critic.normalized_weights():
            mat = w.reshape(w.shape[0], -1).double().numpy()
            sigma = np.linalg.svd(mat, compute_uv=False)[0]
            assert 0.9 <= sigma <= 1.1


def test_critic_eval_determinism_and_shape_check():
    critic = ActionCritic(TINY).eval()
    x = torch.rand(3, 16, 16)
    with torch.no_grad():
        assert torch.equal(critic_logits(x, critic), critic_logits(x, critic))
        assert critic_logits(torch.rand(5, 3, 16, 16), critic).shape == (5, 16)
    with pytest.raises(ValueError):
        critic_logits(torch.rand(3, 8, 16), critic)


def test_kl_uniform_identity_and_oracle():
    assert abs(kl_uniform(np.full(15, 1 / 15))) < 1e-12
    one_hot = np.zeros(15)
    one_hot[4] = 1.0
    assert kl_uniform(one_hot) == pytest.approx(kl_uniform_sum(one_hot), rel=1e-12)
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(15))
    assert kl_uniform(p) == pytest.approx(kl_uniform_sum(p), rel=1e-12)
    assert kl_uniform(rng.permutation(p)) == pytest.approx(kl_uniform(p), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=15, max_size=15).filter(lambda v: sum(v) > 1e-3))
def test_kl_uniform_nonnegative(values):
    p = np.array(values) / np.sum(values)
    assert kl_uniform(p) >= -1e-12


@pytest.mark.parametrize("bad", [np.full(15, 0.1), np.r_[-0.1, np.full(14, 1.1 / 14)],
                                 np.r_[np.nan, np.zeros(14)]])
def test_kl_uniform_rejects_invalid(bad):
    with pytest.raises(ValueError):
        kl_uniform(bad)


def test_uniform_critic_losses():
    labels = torch.tensor([0, 7, 14])
    zeros = torch.zeros(3, 16, dtype=torch.float64)
    loss_c, loss_g = stage2_terms(zeros, zeros, zeros, labels, 15, 0.3, 0.8)
    assert float(loss_c) == pytest.approx(2 * math.log(16), abs=1e-12)
    # uniform action posterior: the KL term vanishes and only w1 * CE remains
    assert float(loss_g) == pytest.approx(0.3 * math.log(16), abs=1e-12)


def test_stage2_gradient_routing():
    torch.manual_seed(0)
    net = TINY.build_predictor()
    critic = ActionCritic(TINY)
    frames, commands = torch.rand(3, 4, 3, 16, 16), torch.rand(3, 4) * 0.4 - 0.2
    targets = torch.rand(3, 3, 16, 16)
    loss_c, loss_g = stage2_losses(frames, commands, targets, net, critic, TINY.grid, 0.5, 0.5)
    loss_c.backward()
    assert all(p.grad is None for p in net.parameters())
    assert any(p.grad is not None for p in critic.parameters())
    critic.zero_grad()
    net.zero_grad()
    loss_g.backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in critic.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in net.parameters())


def test_action_labels_use_nearest_grid_point():
    grid = make_action_grid(-0.24, 0.28, 15)
    labels = action_labels(torch.tensor([-0.24, 0.28, 0.5, 0.0]), grid)
    assert labels.tolist() == [0, 14, 14, int(np.argmin(np.abs(grid.values)))]


# -- training bookkeeping ----------------------------------------------------------

def _windows(n=10, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return [TrainingWindow(t, rng.random((4, 3, size, size)).astype(np.float32),
                           rng.uniform(-0.2, 0.2, 4), rng.random((3, size, size)).astype(
                               np.float32)) for t in range(n)]


def test_train_bookkeeping_both_stages():
    predictor, critic, log = train_sfam(_windows(), TINY, seed=0)
    assert len(log.stage1) == 1 and len(log.stage2_critic) == 1
    assert len(log.stage2_gen) == 1 and len(log.critic_accuracy) == 1
    assert not predictor.training and not critic.training


def test_train_is_deterministic():
    _, _, a = train_sfam(_windows(), TINY, seed=3)
    _, _, b = train_sfam(_windows(), TINY, seed=3)
    assert a.as_dict() == b.as_dict()


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train_sfam([], TINY)


# -- branch rollouts and scoring -------------------------------------------------------

def test_conditioned_predictions_match_independent_rollouts():
    torch.manual_seed(0)
    net = TINY.build_predictor()
    grid = make_action_grid(-0.24, 0.28, 15)
    frames = torch.rand(4, 3, 16, 16)
    past = torch.tensor([0.02, -0.05, 0.1])
    preds = conditioned_predictions(frames, past, grid, net)
    assert preds.shape == (15, 3, 16, 16)
    for i, v in enumerate(grid.values):
        naive = rollout_predict(frames, torch.cat([past, torch.tensor([v], dtype=past.dtype)]),
                                net)
        assert float((preds[i] - naive).abs().max()) <= 1e-6


def test_batched_branches_with_small_chunks():
    torch.manual_seed(1)
    net = TINY.build_predictor()
    grid = make_action_grid(-0.3, 0.3, 5)
    frames, past = torch.rand(3, 4, 3, 16, 16), torch.rand(3, 3) * 0.2
    full = conditioned_predictions_batch(frames, past, grid, net)
    chunked = conditioned_predictions_batch(frames, past, grid, net, chunk=4)
    assert torch.allclose(full, chunked, atol=1e-6)
    for b in range(3):
        assert torch.allclose(full[b], conditioned_predictions(frames[b], past[b], grid, net),
                              atol=1e-6)


def test_two_point_grid():
    net = TINY.build_predictor()
    preds = conditioned_predictions(torch.rand(4, 3, 16, 16), torch.zeros(3),
                                    make_action_grid(-0.1, 0.1, 2), net)
    assert preds.shape[0] == 2


def test_dissimilarity_profile_examples():
    grid = make_action_grid(-1, 1, 3)
    actual = torch.rand(3, 16, 16)
    other = torch.rand(3, 16, 16)
    prof = dissimilarity_profile(torch.stack([other, actual, other]), actual, grid)
    assert prof.dssims[1] == pytest.approx(0.0, abs=1e-7)
    assert np.all((prof.dssims >= 0) & (prof.dssims <= 1))
    assert prof.dssims[0] == prof.dssims[2]
    assert prof.dssims[0] == pytest.approx(dssim(other.double().numpy(),
                                                 actual.double().numpy()), abs=1e-6)
    with pytest.raises(ValueError):
        dissimilarity_profile(torch.rand(3, 3, 8, 8), actual, grid)


def test_deviation_examples():
    grid = make_action_grid(-1, 1, 3)
    assert sfam_deviation(DissimilarityProfile(grid, [0.3, 0.1, 0.2]), 1.0) == 1.0
    assert sfam_deviation(DissimilarityProfile(grid, [0.3, 0.1, 0.2]), 0.0) == 0.0
    assert sfam_deviation(DissimilarityProfile(grid, [0.2, 0.2, 0.2]), 0.5) == 1.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=5, max_size=5), st.floats(-1, 1))
def test_deviation_invariant_under_increasing_transform(values, u):
    grid = make_action_grid(-1, 1, 5)
    d = np.array(values) / 1000
    base = sfam_deviation(DissimilarityProfile(grid, d), u)
    assert sfam_deviation(DissimilarityProfile(grid, np.exp(3 * d) + 2), u) == base
    assert sfam_deviation(DissimilarityProfile(grid, 5 * d - 1), u) == base


# -- trained behavior --------------------------------------------------------------------

def _mean_dssims(model, windows):
    f = torch.from_numpy(np.stack([w.frames for w in windows]))
    u = torch.from_numpy(np.stack([w.commands for w in windows])).float()
    t = torch.from_numpy(np.stack([w.target for w in windows]))
    pred = rollout_predict(f, u, model)
    with torch.no_grad():
        d_pred = (1 - batch_ssim(pred, t, 5)) / 2
        d_copy = (1 - batch_ssim(f[:, -1], t, 5)) / 2
    return float(d_pred.mean()), float(d_copy.mean())


def test_stage1_loss_decreases(trained):
    assert trained.stage1_log.stage1[-1] < trained.stage1_log.stage1[0]


def test_prediction_beats_copying_last_frame(trained):
    d_pred, d_copy = _mean_dssims(trained.stage1, trained.held_windows)
    assert d_pred < d_copy


def test_action_conditioning_is_live(trained):
    ws = trained.held_windows
    turning = max(ws, key=lambda w: abs(w.commands).max())
    f = torch.from_numpy(turning.frames)
    u = torch.from_numpy(turning.commands).float()
    base = rollout_predict(f, u, trained.stage1)
    permuted = rollout_predict(f, u.flip(0), trained.stage1)
    assert float((base - permuted).abs().max()) > 1e-4


def test_stage2_does_not_collapse(trained):
    d1, _ = _mean_dssims(trained.stage1, trained.held_windows)
    d2, _ = _mean_dssims(trained.stage2, trained.held_windows)
    assert d2 <= 1.1 * d1
    assert trained.stage2_log.critic_accuracy[-1] < 0.95
