"""Acceptance criteria, one test each.  Every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the desk-scale
end-to-end run (criterion 7) takes roughly 75 minutes on one CPU core.
"""
import filecmp
import math
import time

import numpy as np
import pytest
import torch

from loopwatch.cfam import Cebgan, CfamConfig, cebgan_losses, hinge_losses, train_cfam
from loopwatch.dataio import (WorldConfig, generate_dataset, make_windows, save_dataset,
                              simulate_episode)
from loopwatch.metrics import make_action_grid, ssim
from loopwatch.monitor import (MonitorConfig, calibrate_threshold, evaluate,
                               run_monitor, window_trigger, with_thresholds)
from loopwatch.sfam import (ActionCritic, PredNet, SfamConfig, StepTrace, conditioned_predictions,
                            kl_uniform, rollout_predict, stage1_loss, train_sfam)
from oracles import central_difference, naive_ssim, relative_error, sliding_count_trigger

# desk-scale budget for the end-to-end run
E2E_TRAIN, E2E_CALIB, E2E_HELD = 16, 2, 2
E2E_CFAM = CfamConfig(epochs=12, lr_final=0.05)
E2E_SFAM = SfamConfig(epochs_stage1=10, epochs_stage2=1, windows_per_epoch=1000)
E2E_SFAM_STAGE2_WINDOWS = 400


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return report


def test_criterion_1_ssim_oracle(verdict):
    start = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        a, b = rng.random((3, 32, 32)), rng.random((3, 32, 32))
        worst = max(worst, abs(ssim(a, b, 5) - naive_ssim(a, b, 5)))
    a = rng.random((3, 32, 32))
    self_err = abs(ssim(a, a, 5) - 1.0)
    elapsed = time.time() - start
    ok = worst <= 1e-6 and self_err <= 1e-9 and elapsed < 60
    assert verdict(1, ok, f"max |diff| {worst:.2e}, |ssim(a,a)-1| {self_err:.1e}, "
                          f"{elapsed:.1f}s")


def test_criterion_2_loss_hand_checks(verdict):
    d_real = torch.tensor([0.3], dtype=torch.float64)
    d_fake = torch.tensor([0.2], dtype=torch.float64)
    loss_d, loss_g = hinge_losses(d_real, d_fake, d_fake, 1.0)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    zeros = [[torch.zeros(1, 6, 16, 16, dtype=torch.float64)]]
    s1 = float(stage1_loss(x, x, x, zeros))
    kl = kl_uniform(np.full(15, 1 / 15))
    errs = (abs(float(loss_d) - 1.1), abs(float(loss_g) - 0.2), abs(s1 + 0.5), abs(kl))
    ok = errs[0] <= 1e-12 and errs[1] <= 1e-12 and errs[2] <= 1e-9 and errs[3] <= 1e-12
    assert verdict(2, ok, "L_D {:.1e}, L_G {:.1e}, stage-1 {:.1e}, KL {:.1e}".format(*errs))


def test_criterion_3_gradient_checks(verdict):
    start = time.time()
    torch.manual_seed(0)
    tiny = CfamConfig(image_size=8, conv_channels=(4, 8), noise_dim=5, hidden_dim=8,
                      batch_size=4)
    model = Cebgan(tiny).double().train()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64)
    u = torch.rand(4, generator=g, dtype=torch.float64) * 0.5 - 0.25
    z = torch.rand(4, 5, generator=g, dtype=torch.float64)
    errors = {}
    for name, which, params in (("L_D", 0, list(model.discriminator.parameters())),
                                ("L_G", 1, list(model.generator.parameters()))):
        model.zero_grad()
        cebgan_losses(u, z, x, model)[which].backward()
        analytic = torch.cat([p.grad.ravel() for p in params])
        numeric = central_difference(lambda: cebgan_losses(u, z, x, model)[which], params)
        errors[name] = relative_error(analytic, torch.cat([n.ravel() for n in numeric]))

    net = PredNet((3, 4), 16, 16).double()
    cfg = SfamConfig(height=16, width=16, channels=(3, 4))
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
    errors["stage-1"] = relative_error(analytic, numeric)
    elapsed = time.time() - start
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    assert verdict(3, ok, f"relative errors {detail}, {elapsed:.0f}s")


def test_criterion_4_shape_suite(verdict):
    cfg = SfamConfig(height=120, width=160)
    net = cfg.build_predictor()
    state = net.initial_state(1)
    with torch.no_grad():
        state = net.bottom_up(state, torch.rand(1, 3, 120, 160))
        tile = net.command_tile(torch.tensor([0.0]), state.errors[-1])
        logits = ActionCritic(cfg)(torch.rand(1, 3, 120, 160))
    checks = {
        "channels": list(net.channels) == [3, 32, 48, 64],
        "error channels": [e.shape[1] for e in state.errors] == [6, 64, 96, 128],
        "sizes": [tuple(e.shape[2:]) for e in state.errors]
        == [(120, 160), (60, 80), (30, 40), (15, 20)],
        "tile": tuple(tile.shape[1:]) == (1, 15, 20),
        "logits": logits.shape[-1] == 16,
    }
    failed = [k for k, v in checks.items() if not v]
    assert verdict(4, not failed, "all shapes exact" if not failed else f"wrong: {failed}")


def test_criterion_5_spectral_norm(verdict):
    torch.manual_seed(0)
    critic = ActionCritic(SfamConfig())
    critic.train()
    with torch.no_grad():
        for _ in range(25):             # one power iteration per training-mode forward
            critic(torch.rand(1, *critic.input_shape))
    critic.eval()
    sigmas = []
    with torch.no_grad():
        for w in critic.normalized_weights():
            mat = w.reshape(w.shape[0], -1).double().numpy()
            sigmas.append(float(np.linalg.svd(mat, compute_uv=False)[0]))
    ok = all(0.9 <= s <= 1.1 for s in sigmas)
    assert verdict(5, ok, f"{len(sigmas)} layers, sigma in [{min(sigmas):.4f}, "
                          f"{max(sigmas):.4f}]")


def test_criterion_6_branch_rollouts(verdict):
    torch.manual_seed(0)
    net = SfamConfig().build_predictor().eval()
    grid = make_action_grid(-0.24, 0.28, 15)
    frames = torch.rand(4, 3, 64, 80)
    past = torch.tensor([0.02, -0.05, 0.1])
    preds = conditioned_predictions(frames, past, grid, net)
    worst = 0.0
    for i, v in enumerate(grid.values):
        naive = rollout_predict(frames, torch.cat([past, torch.tensor([v])]), net)
        worst = max(worst, float((preds[i] - naive).abs().max()))
    assert verdict(6, worst <= 1e-6, f"max |diff| over 15 branches {worst:.1e}")


def test_criterion_8_determinism(verdict, tmp_path):
    world = WorldConfig()
    eps = [simulate_episode(world, s, 40) for s in (1, 2)]
    a = save_dataset(generate_dataset(world, 7, 2, 1, 1, 60, 10), tmp_path / "a", world)
    b = save_dataset(generate_dataset(world, 7, 2, 1, 1, 60, 10), tmp_path / "b", world)
    cmp = filecmp.dircmp(a, b)

    def identical(c):
        return (not c.diff_files and not c.left_only and not c.right_only and not c.funny_files
                and all(identical(s) for s in c.subdirs.values()))

    files_same = identical(cmp) and all(
        filecmp.cmp(p, b / p.relative_to(a), shallow=False) for p in a.rglob("*") if p.is_file())

    pairs = [(f, u) for ep in eps for f, u in zip(ep.frames, ep.steering)]
    ccfg = CfamConfig(epochs=2)
    cfam1, log1 = train_cfam(pairs, ccfg, seed=3)
    cfam2, log2 = train_cfam(pairs, ccfg, seed=3)
    windows = [w for ep in eps for w in make_windows(ep)]
    scfg = SfamConfig(epochs_stage1=1, epochs_stage2=1, windows_per_epoch=16)
    sfam1, _, slog1 = train_sfam(windows, scfg, seed=3)
    sfam2, _, slog2 = train_sfam(windows, scfg, seed=3)
    mcfg = MonitorConfig(tau_cfam=0.05, tau_sfam=0.05)
    r1 = run_monitor(eps[0], mcfg, cfam1, sfam1)
    r2 = run_monitor(eps[0], mcfg, cfam2, sfam2)
    same_p1 = r1.save(tmp_path / "r1.csv").read_bytes() == r2.save(tmp_path / "r2.csv").read_bytes()
    checks = {"dataset bytes": files_same, "cfam losses": log1.as_dict() == log2.as_dict(),
              "sfam losses": slog1.as_dict() == slog2.as_dict(),
              "reports": r1.equals(r2) and same_p1}
    failed = [k for k, v in checks.items() if not v]
    assert verdict(8, not failed, "datasets, losses and reports identical" if not failed
                   else f"differs: {failed}")


def test_criterion_9_window_oracle(verdict):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        k = int(rng.integers(1, n + 1))
        flags = rng.random(int(rng.integers(1, 60))) < rng.random()
        if window_trigger(flags, k, n).tolist() != sliding_count_trigger(flags, k, n):
            mismatches += 1
    assert verdict(9, mismatches == 0, f"{mismatches} mismatches on 1000 sequences")


# -- criterion 7 -----------------------------------------------------------------------------

def _span_summary(reports, cases, which):
    detected, latencies = 0, []
    for report, case in zip(reports, cases):
        m = getattr(evaluate(report, case.sfam), which)
        detected += m.detected_spans
        latencies += m.latencies
    return detected / len(cases), (float(np.median(latencies)) if latencies else math.inf)


def test_criterion_7_desk_scale_end_to_end(verdict):
    start = time.time()
    world = WorldConfig()
    data = generate_dataset(world, seed=0, n_nominal=E2E_TRAIN + E2E_CALIB + E2E_HELD,
                            n_late_right=5, n_early_left=5, length=300)
    train = data.nominal[:E2E_TRAIN]
    calib = data.nominal[E2E_TRAIN:E2E_TRAIN + E2E_CALIB]
    held = data.nominal[E2E_TRAIN + E2E_CALIB:]

    pairs = [(f, u) for ep in train for f, u in zip(ep.frames, ep.steering)]
    cfam, _ = train_cfam(pairs, E2E_CFAM, seed=0)
    windows = [w for ep in train for w in make_windows(ep)]
    stage1_cfg = SfamConfig(**{**vars(E2E_SFAM), "epochs_stage2": 0})
    sfam, _, _ = train_sfam(windows, stage1_cfg, seed=0)
    if E2E_SFAM.epochs_stage2:
        stage2_cfg = SfamConfig(**{**vars(E2E_SFAM), "epochs_stage1": 0,
                                   "windows_per_epoch": E2E_SFAM_STAGE2_WINDOWS})
        sfam, _, _ = train_sfam(windows, stage2_cfg, seed=1, predictor=sfam)
    trained_at = time.time() - start

    config = MonitorConfig()
    calib_reports = [run_monitor(ep, config, cfam, sfam) for ep in calib]
    tau_c, tau_s = calibrate_threshold(calib_reports, 99.0)
    config = with_thresholds(config, tau_c, tau_s)
    held_reports = [run_monitor(ep, config, cfam, sfam) for ep in held]
    case_reports = [run_monitor(case.pair, config, cfam, sfam) for case in data.anomalous]
    elapsed = time.time() - start

    flags = {}
    for which in ("cfam", "sfam"):
        dev = np.concatenate([getattr(r, f"{which}_dev") for r in held_reports])
        flag = np.concatenate([getattr(r, f"{which}_flag") for r in held_reports])
        flags[which] = float(flag[~np.isnan(dev)].mean())
    summary = {w: _span_summary(case_reports, data.anomalous, w) for w in ("cfam", "sfam")}
    ok = elapsed <= 90 * 60
    parts = []
    for which in ("cfam", "sfam"):
        rate, latency = summary[which]
        ok &= rate >= 0.7 and flags[which] <= 0.05 and latency <= 10
        parts.append(f"{which}: spans {rate:.0%}, false flags {flags[which]:.1%}, "
                     f"median latency {latency:g}")
    parts.append(f"tau_cfam {tau_c:.4f}, tau_sfam {tau_s:.4f}")
    parts.append(f"train {trained_at / 60:.0f} min, total {elapsed / 60:.0f} min")
    assert verdict(7, ok, "; ".join(parts))
