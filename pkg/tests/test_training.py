import math

import numpy as np
import pytest
import torch
from torch import nn

from rdstn.checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
from rdstn.data import PairSampler, sample_scale, split_dataset
from rdstn.encoder import EncoderConfig
from rdstn.model import RDSTN, ModelConfig, count_parameters
from rdstn.training import (
    AblationSetting,
    DivergenceError,
    TrainConfig,
    apply_ablation_setting,
    build_model,
    fit,
    l1_loss,
    load_model,
    lr_at,
    make_optimizer,
    snapshot,
    train_step,
)

from conftest import shapes_image


def toy_config(**kw) -> TrainConfig:
    base = dict(
        dim=16,
        num_stages=1,
        blocks_per_stage=2,
        window_size=4,
        num_heads=2,
        decoder_hidden=[32, 32],
        patch=12,
        k_samples=64,
        batch=2,
        steps=6,
        lr=1e-3,
        scale_min=1.0,
        scale_max=2.0,
        eval_scales=[2.0],
        log_every=1,
    )
    base.update(kw)
    return TrainConfig(**base)


def toy_sampler(cfg: TrainConfig, n_images: int = 2) -> PairSampler:
    imgs = [shapes_image(32, s) for s in range(n_images)]
    return PairSampler(imgs, cfg.patch, cfg.k_samples, cfg.batch, cfg.scale_min, cfg.scale_max, cfg.seed)


# ---------------------------------------------------------------------------
# Scale sampling and loss


def test_sample_scale_mean_and_support():
    rng = np.random.default_rng(0)
    draws = np.array([sample_scale(rng, 1.0, 4.0) for _ in range(100_000)])
    assert abs(draws.mean() - 2.5) < 0.02
    assert draws.min() >= 1.0 and draws.max() < 4.0


def test_sample_scale_deterministic():
    a = [sample_scale(np.random.default_rng(7)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_sample_scale_rejects_empty_range():
    with pytest.raises(ValueError):
        sample_scale(np.random.default_rng(0), 2.0, 2.0)


def test_l1_loss_values():
    z = torch.zeros(4, 3)
    assert float(l1_loss(z, z)) == 0.0
    assert math.isclose(float(l1_loss(z + 0.25, z)), 0.25)
    assert math.isclose(float(l1_loss(torch.tensor([1.0, -1.0]), torch.zeros(2))), 1.0)


def test_l1_loss_gradient_sign():
    pred = torch.tensor([0.2, 0.8], requires_grad=True)
    l1_loss(pred, torch.tensor([0.5, 0.5])).backward()
    assert pred.grad.tolist() == [-0.5, 0.5]


def test_l1_loss_shape_mismatch():
    with pytest.raises(ValueError):
        l1_loss(torch.zeros(2), torch.zeros(3))


def test_lr_schedule_halves_at_milestones():
    cfg = toy_config(steps=100, lr=1.0)
    assert [lr_at(cfg, s) for s in (0, 49, 50, 74, 75, 89, 90, 99)] == [1, 1, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125]


# ---------------------------------------------------------------------------
# Ablation and parameter counts


def test_ablation_flags():
    enc = EncoderConfig(dim=16, num_stages=2, blocks_per_stage=1, window_size=4, num_heads=2)
    s1 = apply_ablation_setting("S1", enc)
    s4 = apply_ablation_setting(AblationSetting.S4, enc)
    assert (s1.use_lff, s1.use_gff) == (False, False)
    assert (s4.use_lff, s4.use_gff) == (True, True)
    assert (apply_ablation_setting("s2", enc).use_gff, apply_ablation_setting("S3", enc).use_lff) == (True, True)
    with pytest.raises(ValueError):
        AblationSetting.parse("S5")


def test_count_parameters_affine():
    assert count_parameters(nn.Linear(10, 5)) == 55


@pytest.mark.parametrize("n,d", [(1, 8), (2, 16), (4, 12)])
def test_gff_parameter_difference_closed_form(n, d):
    enc = EncoderConfig(dim=d, num_stages=n, blocks_per_stage=1, window_size=4, num_heads=2)
    counts = {}
    for s in AblationSetting:
        cfg = ModelConfig(apply_ablation_setting(s, enc))
        counts[s.name] = count_parameters(RDSTN(cfg))
    assert counts["S4"] - counts["S3"] == (n + 1) * d * d + d
    assert counts["S4"] > counts["S3"]
    assert counts["S4"] > counts["S2"] > counts["S1"]


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(scale_min=3.0, scale_max=2.0)


# ---------------------------------------------------------------------------
# Steps


def test_train_step_reduces_loss_on_fixed_batch():
    improved = 0
    for seed in range(10):
        cfg = toy_config(seed=seed)
        model = build_model(cfg.model_config(), seed)
        opt = make_optimizer(model, cfg.lr)
        batch = toy_sampler(cfg).batch_at(0)
        first = train_step(model, batch, opt)
        for _ in range(4):
            last = train_step(model, batch, opt)
        improved += last <= first
    assert improved >= 9


def test_zero_lr_leaves_parameters_unchanged():
    cfg = toy_config()
    model = build_model(cfg.model_config(), 0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = make_optimizer(model, 0.0)
    train_step(model, toy_sampler(cfg).batch_at(0), opt, lr=0.0)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_gradient_flow_every_parameter_moves():
    cfg = toy_config()
    model = build_model(cfg.model_config(), 0)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = make_optimizer(model, 1e-3)
    train_step(model, toy_sampler(cfg).batch_at(0), opt)
    for n, p in model.named_parameters():
        if p.grad is not None and p.grad.abs().max() > 0:
            assert not torch.equal(p.detach(), before[n]), n


def test_train_step_is_deterministic():
    def run():
        cfg = toy_config()
        model = build_model(cfg.model_config(), 3)
        opt = make_optimizer(model, cfg.lr)
        sampler = toy_sampler(cfg)
        return [train_step(model, sampler.batch_at(s), opt) for s in range(3)]

    assert run() == run()


def test_divergence_is_reported():
    cfg = toy_config()
    model = build_model(cfg.model_config(), 0)
    with torch.no_grad():
        model.decoder.mlp.layers[-1].bias.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        train_step(model, toy_sampler(cfg).batch_at(0), make_optimizer(model, 1e-3))


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = toy_config()
    model = build_model(cfg.model_config(), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, snapshot(model, None, cfg, 0, []))
    loaded, ckpt = load_model(path)
    x = torch.rand(1, 1, 9, 11)
    q = torch.rand(1, 50, 2) * 2 - 1
    with torch.no_grad():
        assert torch.equal(model(x, q), loaded(x, q))
    assert ckpt.train_config == cfg.to_dict()


def test_checkpoint_config_mismatch(tmp_path):
    cfg = toy_config()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, snapshot(build_model(cfg.model_config()), None, cfg, 0, []))
    other = toy_config(dim=24).model_config()
    with pytest.raises(ConfigMismatchError) as err:
        load_model(path, other)
    assert "encoder.dim" in err.value.diffs


def test_truncated_checkpoint_fails_checksum(tmp_path):
    cfg = toy_config()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, snapshot(build_model(cfg.model_config()), None, cfg, 0, []))
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_fit_writes_artifacts(tmp_path, dataset_dir):
    split = split_dataset(dataset_dir)
    res = fit(toy_config(steps=3, eval_max_images=1), split, tmp_path / "run")
    assert res.last.exists() and res.best.exists()
    assert (tmp_path / "run" / "train_log.jsonl").read_text().count("loss") == 3
    assert res.history and math.isfinite(res.history[-1]["psnr"])
    assert load_checkpoint(res.last).step == 3


def test_resume_matches_uninterrupted_run(tmp_path, dataset_dir):
    split = split_dataset(dataset_dir)
    cfg = toy_config(steps=6, eval_max_images=1)
    full = fit(cfg, split, tmp_path / "full")
    fit(cfg, split, tmp_path / "part", stop_at=3)
    resumed = fit(cfg, split, tmp_path / "part", resume=True)
    assert resumed.losses == full.losses[3:]
    assert resumed.checksum == full.checksum


def test_resume_refuses_other_architecture(tmp_path, dataset_dir):
    split = split_dataset(dataset_dir)
    fit(toy_config(steps=4, eval_max_images=1), split, tmp_path / "r", stop_at=2)
    with pytest.raises(ConfigMismatchError):
        fit(toy_config(steps=4, dim=8, eval_max_images=1), split, tmp_path / "r", resume=True)
