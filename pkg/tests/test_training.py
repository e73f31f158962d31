"""Losses, optimization steps, resume semantics, and checkpoint integrity."""

import io

import pytest
import torch

from diffcomm.denoiser import build_denoiser, preset
from diffcomm.errors import CheckpointMismatchError
from diffcomm.training import (
    LossBreakdown,
    TrainingConfig,
    denoise_loss,
    load_checkpoint,
    make_optimizer,
    reconstruction_loss,
    run_training,
    save_checkpoint,
    total_loss,
    train_step,
)


def test_denoise_loss_is_mse():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[1.5, 2.0], [2.0, 6.0]])
    expected = (0.25 + 0.0 + 1.0 + 4.0) / 4.0
    assert denoise_loss(a, b).item() == pytest.approx(expected, rel=1e-7)
    with pytest.raises(ValueError):
        denoise_loss(a, b[:1])


def test_reconstruction_loss_blend():
    a = torch.tensor([0.0, 2.0])
    b = torch.tensor([1.0, -1.0])
    # l1 = (1 + 3)/2 = 2 ; l2 = (1 + 9)/2 = 5 ; blend = 0.5*2 + 0.5*5
    assert reconstruction_loss(a, b).item() == pytest.approx(3.5, rel=1e-7)
    with pytest.raises(ValueError):
        reconstruction_loss(a, b[:1])


def test_total_loss_identity_is_exact():
    lb = total_loss(0.123456789, 0.987654321, 0.5)
    assert lb.total == lb.denoise + 0.5 * lb.rec  # exact float equality
    assert lb == LossBreakdown(denoise=0.123456789, rec=0.987654321, total=lb.total)


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(beta_tradeoff=-0.1)
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainingConfig(step_budget=0)
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0.0)


def batch_loss(net, s, x0_bchw, t, eps, beta):
    """The training objective exactly as optimized, differentiable."""
    ab = torch.as_tensor(s.alpha_bars, dtype=x0_bchw.dtype)[t].view(-1, 1, 1, 1)
    x_t = torch.sqrt(ab) * x0_bchw + torch.sqrt(1.0 - ab) * eps
    eps_hat = net(x_t, t)
    x0_hat = (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
    return denoise_loss(eps, eps_hat) + beta * reconstruction_loss(x0_hat, x0_bchw)


def test_gradients_match_central_differences(schedule):
    torch.manual_seed(0)
    net = build_denoiser("tiny", seed=0).double()
    gen = torch.Generator().manual_seed(1)
    x0 = (torch.rand((2, 3, 16, 16), generator=gen, dtype=torch.float64) * 2 - 1)
    t = torch.tensor([100, 700])
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)

    loss = batch_loss(net, schedule, x0, t, eps, beta=0.5)
    loss.backward()

    params = [p for p in net.parameters() if p.grad is not None]
    rng = torch.Generator().manual_seed(2)
    h = 1e-5
    checked = 0
    for _ in range(5):
        p = params[int(torch.randint(0, len(params), (1,), generator=rng))]
        flat = p.detach().reshape(-1)
        j = int(torch.randint(0, flat.numel(), (1,), generator=rng))
        analytic = p.grad.reshape(-1)[j].item()
        with torch.no_grad():
            orig = flat[j].item()
            flat[j] = orig + h
            up = batch_loss(net, schedule, x0, t, eps, beta=0.5).item()
            flat[j] = orig - h
            down = batch_loss(net, schedule, x0, t, eps, beta=0.5).item()
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < 1e-4, (analytic, numeric)
        checked += 1
    assert checked == 5


def test_train_step_updates_and_reports(schedule, make_images):
    net = build_denoiser("tiny", seed=0)
    cfg = TrainingConfig(batch_size=3, step_budget=1, learning_rate=1e-3)
    opt = make_optimizer(net, cfg)
    before = [p.detach().clone() for p in net.parameters()]
    lb = train_step(net, opt, make_images(3), schedule, cfg, torch.Generator().manual_seed(0))
    assert lb.total == lb.denoise + cfg.beta_tradeoff * lb.rec
    assert lb.denoise > 0 and lb.rec > 0
    changed = any(not torch.equal(b, p.detach()) for b, p in zip(before, net.parameters()))
    assert changed


def test_train_step_rejects_nonfinite_batch(schedule):
    net = build_denoiser("tiny", seed=0)
    cfg = TrainingConfig(batch_size=1)
    opt = make_optimizer(net, cfg)
    bad = torch.full((1, 32, 32, 3), float("nan"))
    with pytest.raises(RuntimeError, match="non-finite"):
        train_step(net, opt, bad, schedule, cfg, torch.Generator().manual_seed(0))


def test_train_step_channel_augment_smoke(schedule, make_images):
    net = build_denoiser("tiny", seed=0)
    cfg = TrainingConfig(batch_size=2, channel_augment=True)
    opt = make_optimizer(net, cfg)
    lb = train_step(net, opt, make_images(2), schedule, cfg, torch.Generator().manual_seed(3))
    assert lb.total > 0 and lb.total == lb.denoise + cfg.beta_tradeoff * lb.rec


def test_run_training_history_and_logging(schedule, make_images):
    net = build_denoiser("tiny", seed=0)
    cfg = TrainingConfig(batch_size=2, step_budget=4, learning_rate=1e-3, seed=5)
    stream = io.StringIO()
    history = run_training(net, make_images(6), schedule, cfg, log_interval=2, log_stream=stream)
    assert [step for step, _ in history] == [1, 2, 3, 4]
    lines = stream.getvalue().strip().splitlines()
    assert len(lines) == 2  # steps 2 and 4
    assert lines[0].startswith("step=2 ") and "denoise=" in lines[0]


def test_resume_reproduces_uninterrupted_run(schedule, tmp_path, make_images):
    images = make_images(6)
    cfg = TrainingConfig(batch_size=2, step_budget=4, learning_rate=1e-3, seed=9)

    # uninterrupted reference
    ref = build_denoiser("tiny", seed=1)
    run_training(ref, images, schedule, cfg)

    # two steps, checkpoint, restore, two more
    net = build_denoiser("tiny", seed=1)
    opt = make_optimizer(net, cfg)
    rng = torch.Generator().manual_seed(cfg.seed)
    half = TrainingConfig(batch_size=2, step_budget=2, learning_rate=1e-3, seed=9)
    run_training(net, images, schedule, half, optimizer=opt, rng=rng)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, net, opt, step=2, rng=rng)

    loaded = load_checkpoint(path)
    opt2 = make_optimizer(loaded.net, cfg)
    opt2.load_state_dict(loaded.optimizer_state)
    rng2 = torch.Generator()
    rng2.set_state(loaded.rng_state)
    run_training(loaded.net, images, schedule, cfg, optimizer=opt2, rng=rng2, start_step=loaded.step)

    for a, b in zip(ref.state_dict().values(), loaded.net.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_round_trip_bit_exact(schedule, tmp_path, make_images):
    net = build_denoiser("tiny", seed=2)
    cfg = TrainingConfig(batch_size=2, step_budget=1)
    opt = make_optimizer(net, cfg)
    train_step(net, opt, make_images(2), schedule, cfg, torch.Generator().manual_seed(0))
    path = tmp_path / "snap.pt"
    save_checkpoint(path, net, opt, step=17, rng=torch.Generator().manual_seed(3))
    loaded = load_checkpoint(path)
    assert loaded.step == 17
    assert loaded.config == preset("tiny")
    for a, b in zip(net.state_dict().values(), loaded.net.state_dict().values()):
        assert torch.equal(a, b)
    assert loaded.optimizer_state is not None and loaded.rng_state is not None


def test_checkpoint_version_guard(tmp_path):
    net = build_denoiser("tiny", seed=0)
    payload = {
        "version": 99,
        "config": net.config.to_dict(),
        "model": net.state_dict(),
        "optimizer": None,
        "step": 0,
        "rng_state": None,
    }
    path = tmp_path / "bad.pt"
    torch.save(payload, path)
    with pytest.raises(CheckpointMismatchError, match="version"):
        load_checkpoint(path)


def test_checkpoint_architecture_guard(tmp_path):
    net = build_denoiser("tiny", seed=0)
    path = tmp_path / "tiny.pt"
    save_checkpoint(path, net)
    with pytest.raises(CheckpointMismatchError, match="architecture"):
        load_checkpoint(path, expected=preset("desk"))
    # matching expectation loads fine
    assert load_checkpoint(path, expected=preset("tiny")).config == preset("tiny")
