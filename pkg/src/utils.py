import math

import numpy as np
import torch

UINT64_MASK = 0xFFFFFFFFFFFFFFFF

def make_rng(seed, *stream):
    """
    Create an independent numpy generator for a seed and optional stream labels

    Args:
        seed (int): Any 64-bit integer, negative values included
        *stream (int): Extra integers selecting an independent sub-stream

    Returns:
        numpy.random.Generator: Seeded generator
    """
    entropy = [int(seed) & UINT64_MASK] + [int(s) & UINT64_MASK for s in stream]
    return np.random.default_rng(np.random.SeedSequence(entropy))

def set_seed_everywhere(seed):
    """
    Seed torch's global generator so parameter initialization is reproducible

    Args:
        seed (int): Run seed
    """
    torch.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)

def make_torch_generator(seed):
    """Create a CPU torch generator for policy sampling noise"""
    generator = torch.Generator()
    generator.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return generator

def round_half_away(value):
    """
    Round to the nearest integer with halves moving away from zero

    Args:
        value (float): Value to round

    Returns:
        int: Rounded value
    """
    return int(math.copysign(math.floor(abs(value) + 0.5), value))

def validate_shape(array, expected, what):
    """
    Check an array's trailing shape, using None as a wildcard

    Args:
        array: numpy array or torch tensor
        expected (tuple): Expected trailing dimensions
        what (str): Name used in the error message

    Raises:
        ValueError: If the shape does not match
    """
    shape = tuple(array.shape)
    if len(shape) < len(expected):
        raise ValueError(f"{what}: expected trailing shape {expected}, got {shape}")
    tail = shape[len(shape) - len(expected):]
    for got, want in zip(tail, expected):
        if want is not None and got != want:
            raise ValueError(f"{what}: expected trailing shape {expected}, got {shape}")

def format_duration(seconds):
    """
    Format a duration in human readable format

    Args:
        seconds (float): Duration in seconds

    Returns:
        str: Formatted duration (e.g., "1h 02m 03s")
    """
    if seconds < 60:
        return f"{seconds:.1f}s"

    minutes, secs = divmod(int(seconds), 60)
    hours, minutes = divmod(minutes, 60)

    if hours:
        return f"{hours}h {minutes:02d}m {secs:02d}s"
    return f"{minutes}m {secs:02d}s"
