import math

import numpy as np
import pytest
import torch

from src.augment import per_patch_normalize, random_crop_batch, sample_mask_batch, to_float
from src.auxtasks import (
    ContrastiveTask,
    Data2VecHead,
    Data2VecTask,
    MaeDecoder,
    MaeTask,
    NoAuxTask,
    aux_update,
    data2vec_loss,
    data2vec_predict,
    data2vec_target,
    info_nce,
    mae_forward,
    mae_loss,
    make_aux_task,
)
from src.encoders import CnnEncoder, ViTConfig, ViTEncoder, make_encoder, patchify, unpatchify
from src.numcheck import brute_force_infonce, check_gradients
from src.utils import make_rng


def gen(seed):
    return torch.Generator().manual_seed(seed)


def snapshot(module):
    return {name: p.detach().clone() for name, p in module.named_parameters()}


@pytest.fixture
def small_vit(float64):
    torch.manual_seed(0)
    return ViTEncoder(ViTConfig(image_size=24, patch_size=12, in_channels=2, embed_dim=8, depth=2, heads=2, mlp_dim=8))


# ---------------------------------------------------------------------------
# InfoNCE

def test_uniform_logits_give_log_batch_size(float64):
    B = 128
    q = torch.randn(B, 6, generator=gen(0))
    k = torch.randn(B, 6, generator=gen(1))
    loss = info_nce(q, k, torch.zeros(6, 6))
    assert abs(loss.item() - math.log(B)) < 1e-9


def test_separated_pairs_drive_the_loss_to_zero(float64):
    eye = torch.eye(4)
    losses = [info_nce(s * eye, s * eye, eye).item() for s in (1.0, 2.0, 5.0)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-9


@pytest.mark.parametrize("B", [1, 3, 8])
def test_info_nce_matches_loop_evaluation(float64, B):
    q = torch.randn(B, 5, generator=gen(B))
    k = torch.randn(B, 5, generator=gen(B + 10))
    W = 0.5 * torch.randn(5, 5, generator=gen(B + 20))
    assert abs(info_nce(q, k, W).item() - brute_force_infonce(q, k, W)) < 1e-10


def test_info_nce_stays_finite_for_large_logits(float64):
    eye = torch.eye(3)
    assert math.isfinite(info_nce(40.0 * eye, 40.0 * eye, eye).item())
    with pytest.raises(OverflowError):
        brute_force_infonce(40.0 * eye, 40.0 * eye, eye)


def test_info_nce_keys_receive_no_gradient(float64):
    q = torch.randn(4, 3, generator=gen(0), requires_grad=True)
    k = torch.randn(4, 3, generator=gen(1), requires_grad=True)
    info_nce(q, k, torch.eye(3)).backward()
    assert q.grad is not None
    assert k.grad is None


def test_row_constant_on_the_logits_leaves_the_loss_unchanged(float64):
    # a shared offset on every key adds q_i^T W v to all of row i
    q = torch.randn(6, 4, generator=gen(5))
    k = torch.randn(6, 4, generator=gen(6))
    W = torch.randn(4, 4, generator=gen(7))
    shift = 3.0 * torch.randn(1, 4, generator=gen(8))
    assert abs(info_nce(q, k + shift, W).item() - info_nce(q, k, W).item()) < 1e-10


def test_info_nce_gradients(float64):
    q = torch.randn(5, 4, generator=gen(2), requires_grad=True)
    k = torch.randn(5, 4, generator=gen(3))
    W = torch.randn(4, 4, generator=gen(4), requires_grad=True)
    report = check_gradients(lambda: info_nce(q, k, W), {"queries": q, "W": W}, eps=1e-6)
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# Data2Vec

def test_data2vec_target_summands_have_zero_token_mean(small_vit):
    obs = torch.rand(2, 2, 24, 24, generator=gen(0))
    target = data2vec_target(obs, small_vit, k=2)
    assert target.shape == (2, 4, 8)
    assert not target.requires_grad
    assert torch.all(target.mean(dim=-1).abs() < 1e-10)


def test_include_first_adds_one_more_block(small_vit):
    obs = torch.rand(1, 2, 24, 24, generator=gen(1))
    assert torch.equal(
        data2vec_target(obs, small_vit, k=1, include_first=True),
        data2vec_target(obs, small_vit, k=2),
    )


def test_smooth_l1_is_continuous_at_beta():
    zero = torch.zeros(1, dtype=torch.float64)
    below = data2vec_loss(zero, torch.tensor([2.0 - 1e-9], dtype=torch.float64), beta=2.0)
    above = data2vec_loss(zero, torch.tensor([2.0 + 1e-9], dtype=torch.float64), beta=2.0)
    assert abs(below.item() - 1.0) < 1e-8
    assert abs(above.item() - 1.0) < 1e-8
    assert data2vec_loss(zero, torch.tensor([1.0], dtype=torch.float64)).item() == pytest.approx(0.25)
    assert data2vec_loss(zero, torch.tensor([4.0], dtype=torch.float64)).item() == pytest.approx(3.0)


def test_smooth_l1_vanishes_only_at_the_target():
    t = torch.randn(2, 5, 8, generator=gen(5))
    assert data2vec_loss(t, t.clone()).item() == 0.0
    assert data2vec_loss(t, t + 0.1).item() > 0.0


def test_data2vec_prediction_covers_masked_tokens(small_vit):
    head = Data2VecHead(8)
    obs = torch.rand(2, 2, 24, 24, generator=gen(2))
    mask = torch.tensor([[0, 3], [1, 2]])
    assert data2vec_predict(obs, mask, small_vit, head).shape == (2, 2, 8)


def test_data2vec_loss_gradients(small_vit):
    head = Data2VecHead(8)
    shadow = ViTEncoder(small_vit.config)
    obs = torch.rand(1, 2, 24, 24, generator=gen(3))
    mask = torch.tensor([[1, 2]])
    target = data2vec_target(obs, shadow, k=2)[:, [1, 2]]

    def loss_fn():
        return data2vec_loss(target, data2vec_predict(obs, mask, small_vit, head), beta=2.0)

    params = {"head.fc0": head.decoder.net[0].weight, "pos_embed": small_vit.pos_embed,
              "mask_token": small_vit.mask_token}
    report = check_gradients(loss_fn, params, eps=1e-6)
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# MAE

def test_mae_loss_with_zero_prediction_is_about_one(rng):
    obs = torch.rand(2, 9, 84, 84, generator=gen(6))
    mask = sample_mask_batch(0.75, 2, rng)
    loss = mae_loss(torch.zeros(2, 49, 1296), obs, mask)
    assert loss.item() == pytest.approx(1.0, abs=1e-3)


def test_mae_loss_ignores_visible_patches(rng):
    obs = torch.rand(2, 9, 84, 84, generator=gen(7))
    mask = sample_mask_batch(0.75, 2, rng)
    prediction = per_patch_normalize(patchify(obs))
    assert mae_loss(prediction, obs, mask).item() == 0.0

    visible = torch.ones(2, 49, dtype=torch.bool)
    visible.scatter_(1, mask, False)
    prediction[visible] += 5.0
    assert mae_loss(prediction, obs, mask).item() == 0.0


def test_masked_pixels_do_not_reach_the_encoder(tiny_config, rng):
    torch.manual_seed(1)
    config = tiny_config(aux_task="mae")
    encoder = make_encoder(config)
    decoder = MaeDecoder(embed_dim=16, decoder_dim=8, depth=1, heads=2, mlp_dim=16)
    obs = torch.rand(2, 9, 84, 84, generator=gen(8))
    mask = sample_mask_batch(0.75, 2, rng)

    patches = patchify(obs)
    noisy = patches.clone()
    rows = torch.arange(2).unsqueeze(-1)
    noisy[rows, mask] = torch.rand(2, mask.shape[1], 1296, generator=gen(9))
    perturbed = unpatchify(noisy)

    _, clean_out = mae_forward(obs, mask, encoder, decoder)
    _, noisy_out = mae_forward(perturbed, mask, encoder, decoder)
    assert clean_out.tokens.tokens.shape == (2, 12, 16)
    assert torch.equal(clean_out.tokens.tokens, noisy_out.tokens.tokens)


def test_visible_patches_get_no_gradient(rng):
    obs = torch.rand(2, 9, 84, 84, generator=gen(11))
    mask = sample_mask_batch(0.75, 2, rng)
    prediction = torch.randn(2, 49, 1296, generator=gen(12), requires_grad=True)
    mae_loss(prediction, obs, mask).backward()

    visible = torch.ones(2, 49, dtype=torch.bool)
    visible.scatter_(1, mask, False)
    assert torch.all(prediction.grad[visible] == 0.0)
    assert torch.all(prediction.grad[~visible].abs().sum(dim=-1) > 0.0)


def test_mae_loss_gradients(small_vit):
    decoder = MaeDecoder(embed_dim=8, decoder_dim=8, depth=1, heads=2, mlp_dim=8, num_patches=4, patch_dim=288)
    obs = torch.rand(1, 2, 24, 24, generator=gen(10))
    mask = torch.tensor([[0, 3]])

    def loss_fn():
        prediction, _ = mae_forward(obs, mask, small_vit, decoder)
        return mae_loss(prediction, obs, mask, patch_size=12)

    params = {"decoder.mask_token": decoder.mask_token, "decoder.input_proj": decoder.input_proj.weight,
              "encoder.pos_embed": small_vit.pos_embed}
    report = check_gradients(loss_fn, params, eps=1e-6)
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# Tasks

def test_no_aux_task_leaves_the_encoder_alone(tiny_config, pixel_batch, rng):
    torch.manual_seed(2)
    config = tiny_config()
    encoder = make_encoder(config)
    task = make_aux_task("none", encoder, config)
    before = snapshot(encoder)
    assert isinstance(task, NoAuxTask)
    assert aux_update(task, pixel_batch(4), rng) == 0.0
    after = snapshot(encoder)
    assert all(torch.equal(before[n], after[n]) for n in before)


@pytest.mark.parametrize("name, cls", [("data2vec", Data2VecTask), ("mae", MaeTask), ("contrastive", ContrastiveTask)])
def test_task_update_trains_the_encoder(tiny_config, pixel_batch, rng, name, cls):
    torch.manual_seed(3)
    config = tiny_config(aux_task=name)
    encoder = make_encoder(config)
    task = make_aux_task(name, encoder, config)
    assert isinstance(task, cls)
    before = snapshot(encoder)
    loss = aux_update(task, pixel_batch(8), rng)
    assert math.isfinite(loss)
    after = snapshot(encoder)
    assert any(not torch.equal(before[n], after[n]) for n in before)


def test_data2vec_momentum_encoder_follows_at_encoder_tau(tiny_config, pixel_batch, rng):
    torch.manual_seed(4)
    config = tiny_config(aux_task="data2vec")
    encoder = make_encoder(config)
    task = make_aux_task("data2vec", encoder, config)
    shadow_before = snapshot(task.momentum_encoder.module)
    task.update(pixel_batch(4), rng)
    online = snapshot(encoder)
    for name, p in task.momentum_encoder.module.named_parameters():
        expected = 0.95 * shadow_before[name] + 0.05 * online[name]
        assert torch.allclose(p, expected, atol=1e-6)
        assert not p.requires_grad


def test_data2vec_targets_do_not_collapse(tiny_config, pixel_batch):
    torch.manual_seed(9)
    config = tiny_config(aux_task="data2vec")
    task = make_aux_task("data2vec", make_encoder(config), config)
    rng = make_rng(5)
    fixed_obs = to_float(random_crop_batch(pixel_batch(4), make_rng(6)))
    for _ in range(20):
        task.update(pixel_batch(8), rng)
        target = data2vec_target(fixed_obs, task.momentum_encoder.module, config.data2vec_k)
        # spread across samples and tokens, per channel
        assert target.var(dim=(0, 1)).mean().item() > 1e-3


def test_contrastive_task_uses_its_own_batch_size(tiny_config, rng):
    torch.manual_seed(5)
    config = tiny_config(aux_task="contrastive", contrastive_batch_size=4)
    encoder = make_encoder(config)
    task = make_aux_task("contrastive", encoder, config)
    seen = []
    original = task.projection.forward
    task.projection.forward = lambda x: seen.append(x.shape[0]) or original(x)
    task.update(rng.integers(0, 256, size=(8, 9, 100, 100), dtype=np.uint8), rng)
    assert seen == [4]


def test_make_aux_task_errors(tiny_config):
    config = tiny_config()
    with pytest.raises(ValueError):
        make_aux_task("byol", make_encoder(config), config)
    with pytest.raises(ValueError):
        make_aux_task("mae", CnnEncoder(latent_dim=16), config)
    with pytest.raises(ValueError):
        make_aux_task("data2vec", CnnEncoder(latent_dim=16), config)


def test_cnn_encoder_takes_only_the_plain_baseline(tiny_config):
    config = tiny_config()
    with pytest.raises(ValueError, match="ViT"):
        make_aux_task("contrastive", CnnEncoder(latent_dim=16), config)
    assert isinstance(make_aux_task("none", CnnEncoder(latent_dim=16), config), NoAuxTask)


@pytest.mark.parametrize("name", ["data2vec", "mae", "contrastive"])
def test_task_state_round_trip(tiny_config, pixel_batch, name):
    config = tiny_config(aux_task=name)
    torch.manual_seed(7)
    task = make_aux_task(name, make_encoder(config), config)
    task.update(pixel_batch(4), make_rng(0))
    torch.manual_seed(8)
    other = make_aux_task(name, make_encoder(config), config)
    other.load_state_dict(task.state_dict())

    for part_name, part in task.parts().items():
        source = part.module if hasattr(part, "module") else part
        target = other.parts()[part_name]
        target = target.module if hasattr(target, "module") else target
        for (n, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
            assert torch.equal(a, b), f"{part_name}.{n}"
    assert other.store.step_count == task.store.step_count
    if name == "contrastive":
        assert torch.equal(other.W, task.W)


def test_aux_batch_is_cropped_to_84(tiny_config, rng):
    torch.manual_seed(9)
    config = tiny_config(aux_task="mae")
    encoder = make_encoder(config)
    task = make_aux_task("mae", encoder, config)
    shapes = []
    original = encoder.embed
    encoder.embed = lambda patches, *a, **kw: shapes.append(tuple(patches.shape)) or original(patches, *a, **kw)
    task.update(rng.integers(0, 256, size=(3, 9, 100, 100), dtype=np.uint8), rng)
    assert shapes == [(3, 49, 1296)]
