"""
Image augmentation for RL updates and mask generation for auxiliary tasks
"""

from dataclasses import dataclass

import numpy as np
import torch

from .utils import round_half_away, validate_shape

INPUT_SIZE = 100
OUTPUT_SIZE = 84
MAX_OFFSET = INPUT_SIZE - OUTPUT_SIZE
NUM_PATCHES = 49
NORM_EPS = 1e-6


@dataclass(frozen=True)
class CropSpec:
    offset: tuple
    input_hw: tuple = (INPUT_SIZE, INPUT_SIZE)
    output_hw: tuple = (OUTPUT_SIZE, OUTPUT_SIZE)

    def __post_init__(self):
        for start, size, full in zip(self.offset, self.output_hw, self.input_hw):
            if not 0 <= start or start + size > full:
                raise ValueError(f"crop offset {self.offset} does not fit {self.output_hw} in {self.input_hw}")


@dataclass(frozen=True)
class MaskSet:
    masked_indices: np.ndarray
    ratio: float
    num_patches: int = NUM_PATCHES

    def __post_init__(self):
        idx = np.asarray(self.masked_indices)
        if idx.size != mask_count(self.ratio, self.num_patches):
            raise ValueError(f"mask of ratio {self.ratio} must hold {mask_count(self.ratio, self.num_patches)} indices")
        if np.unique(idx).size != idx.size or idx.min(initial=0) < 0 or idx.max(initial=0) >= self.num_patches:
            raise ValueError("mask indices must be unique and inside the patch grid")

    @property
    def visible_indices(self):
        return np.setdiff1d(np.arange(self.num_patches), self.masked_indices)


def mask_count(ratio, num_patches=NUM_PATCHES):
    return round_half_away(ratio * num_patches)


def crop(stack, spec):
    row, col = spec.offset
    height, width = spec.output_hw
    return stack[..., row:row + height, col:col + width]


def random_crop(stack, rng, offset=None):
    """
    Crop one 9x100x100 stack to 84x84 with a single offset shared by all channels

    Args:
        stack (numpy.ndarray): Frame stack (C, 100, 100)
        rng (numpy.random.Generator): Offset stream
        offset (tuple): Force a (row, col) offset instead of drawing one

    Returns:
        numpy.ndarray: Contiguous (C, 84, 84) subwindow
    """
    validate_shape(stack, (None, INPUT_SIZE, INPUT_SIZE), "random_crop input")
    if stack.ndim != 3:
        raise ValueError(f"random_crop expects a single (C, H, W) stack, got {stack.shape}")
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, MAX_OFFSET + 1, size=2))
    return np.ascontiguousarray(crop(stack, CropSpec(offset)))


def random_crop_batch(stacks, rng):
    """Crop a (B, C, 100, 100) batch with an independent offset per sample"""
    validate_shape(stacks, (None, None, INPUT_SIZE, INPUT_SIZE), "random_crop_batch input")
    offsets = rng.integers(0, MAX_OFFSET + 1, size=(len(stacks), 2))
    out = np.empty((*stacks.shape[:2], OUTPUT_SIZE, OUTPUT_SIZE), dtype=stacks.dtype)
    for i, (row, col) in enumerate(offsets):
        out[i] = stacks[i, :, row:row + OUTPUT_SIZE, col:col + OUTPUT_SIZE]
    return out


def center_crop(stacks):
    """Deterministic evaluation view at offset (8, 8)"""
    validate_shape(stacks, (None, INPUT_SIZE, INPUT_SIZE), "center_crop input")
    start = MAX_OFFSET // 2
    return np.ascontiguousarray(crop(stacks, CropSpec((start, start))))


def second_view(stack, rng):
    """An independent random crop of the same source stack"""
    return random_crop(stack, rng)


def sample_mask(ratio, rng, num_patches=NUM_PATCHES):
    """
    Draw a uniform subset of patch indices without replacement

    Args:
        ratio (float): Fraction in (0, 1); count is round(ratio * num_patches)
        rng (numpy.random.Generator): Mask stream

    Returns:
        MaskSet: Sorted masked indices
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    chosen = rng.choice(num_patches, size=mask_count(ratio, num_patches), replace=False)
    return MaskSet(np.sort(chosen), ratio, num_patches)


def sample_mask_batch(ratio, batch_size, rng, num_patches=NUM_PATCHES):
    """Fresh mask per sample, returned as a (B, M) index tensor"""
    masks = [sample_mask(ratio, rng, num_patches).masked_indices for _ in range(batch_size)]
    return torch.as_tensor(np.stack(masks), dtype=torch.long)


def per_patch_normalize(patches, eps=NORM_EPS):
    """Zero-mean, unit-variance targets computed independently for every patch vector"""
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, unbiased=False, keepdim=True)
    return (patches - mean) / torch.sqrt(var + eps)


def to_float(stacks, device=None, dtype=torch.float32):
    """uint8 stacks -> float tensor scaled to [0, 1]"""
    return torch.as_tensor(stacks, device=device).to(dtype) / 255.0
