import numpy as np
import pytest
import torch

from src.augment import (
    CropSpec,
    MaskSet,
    center_crop,
    mask_count,
    per_patch_normalize,
    random_crop,
    random_crop_batch,
    sample_mask,
    sample_mask_batch,
    second_view,
    to_float,
)
from src.utils import make_rng


@pytest.fixture
def stack(rng):
    return rng.integers(0, 256, size=(9, 100, 100), dtype=np.uint8)


def test_forced_offsets_select_corner_windows(stack, rng):
    assert np.array_equal(random_crop(stack, rng, offset=(0, 0)), stack[:, :84, :84])
    assert np.array_equal(random_crop(stack, rng, offset=(16, 16)), stack[:, 16:, 16:])


def test_crop_spec_rejects_offsets_outside_the_frame():
    with pytest.raises(ValueError):
        CropSpec((17, 0))
    with pytest.raises(ValueError):
        CropSpec((0, -1))


def test_wrong_input_shape(rng):
    with pytest.raises(ValueError):
        random_crop(np.zeros((9, 84, 84), np.uint8), rng)


def test_crop_is_a_contiguous_subwindow_with_one_offset_for_all_channels(stack):
    out = random_crop(stack, make_rng(4))
    assert out.shape == (9, 84, 84)
    assert out.flags["C_CONTIGUOUS"]
    matches = [
        (r, c) for r in range(17) for c in range(17)
        if np.array_equal(stack[:, r:r + 84, c:c + 84], out)
    ]
    assert len(matches) >= 1


def test_offsets_are_uniform_on_the_17_by_17_grid():
    rng = make_rng(0)
    # unique row/col ramps make the offset recoverable from the top-left pixel
    rows = np.arange(100)[:, None] * np.ones(100, dtype=np.int64)[None, :]
    cols = rows.T
    source = np.stack([rows, cols] + [rows] * 7).astype(np.uint8)
    counts = np.zeros((17, 17))
    draws = 10000
    for _ in range(draws):
        out = random_crop(source, rng)
        counts[out[0, 0, 0], out[1, 0, 0]] += 1
    expected = draws / 289
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # 288 degrees of freedom; the 0.001 upper quantile is about 368
    assert chi2 < 368


def test_batch_crop_and_center_crop(rng):
    stacks = rng.integers(0, 256, size=(5, 9, 100, 100), dtype=np.uint8)
    out = random_crop_batch(stacks, rng)
    assert out.shape == (5, 9, 84, 84)
    assert np.array_equal(center_crop(stacks), stacks[:, :, 8:92, 8:92])


def test_second_view_comes_from_the_same_source(stack):
    a = second_view(stack, make_rng(1))
    b = second_view(stack, make_rng(1))
    assert np.array_equal(a, b)
    c = second_view(stack, make_rng(2))
    assert np.isin(c, stack).all()


@pytest.mark.parametrize("ratio, masked", [(0.40, 20), (0.75, 37), (0.30, 15), (0.50, 25), (0.60, 29)])
def test_mask_counts(ratio, masked, rng):
    mask = sample_mask(ratio, rng)
    assert mask_count(ratio) == masked
    assert len(mask.masked_indices) == masked
    assert len(np.unique(mask.masked_indices)) == masked
    assert 49 - masked == len(mask.visible_indices)


def test_mae_leaves_twelve_visible_patches(rng):
    assert len(sample_mask(0.75, rng).visible_indices) == 12


def test_mask_ratio_out_of_range(rng):
    with pytest.raises(ValueError):
        sample_mask(1.0, rng)
    with pytest.raises(ValueError):
        sample_mask(0.0, rng)


def test_mask_set_validates_indices():
    with pytest.raises(ValueError):
        MaskSet(np.arange(19), 0.40)
    with pytest.raises(ValueError):
        MaskSet(np.array([0] * 20), 0.40)


def test_batch_masks_are_fresh_per_sample(rng):
    masks = sample_mask_batch(0.40, 8, rng)
    assert masks.shape == (8, 20)
    assert masks.dtype == torch.long
    assert len({tuple(m.tolist()) for m in masks}) > 1


def test_constant_patch_normalizes_to_zero():
    patches = torch.full((2, 1296), 0.5, dtype=torch.float64)
    assert torch.equal(per_patch_normalize(patches), torch.zeros_like(patches))


def test_two_value_patch_normalizes_to_plus_minus_one():
    patch = torch.tensor([0.0, 1.0] * 648, dtype=torch.float64)
    out = per_patch_normalize(patch[None])
    assert torch.allclose(out.abs(), torch.ones_like(out), atol=1e-5)


def test_normalized_patches_have_zero_mean_unit_variance():
    patches = torch.rand(49, 1296, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    out = per_patch_normalize(patches)
    assert torch.all(out.mean(dim=-1).abs() < 1e-6)
    assert torch.all((out.var(dim=-1, unbiased=False) - 1).abs() < 1e-3)


def test_to_float_scales_to_unit_interval():
    x = to_float(np.array([[0, 255]], dtype=np.uint8))
    assert x.dtype == torch.float32
    assert x.tolist() == [[0.0, 1.0]]
