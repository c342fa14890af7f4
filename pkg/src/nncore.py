"""
Differentiable building blocks shared by the encoders, SAC and auxiliary heads.
Gradients come from torch's autograd tape; every op here is covered by a
finite-difference check in the test suite.
"""

import copy
import os
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .logging_config import get_logger

logger = get_logger("nncore")

LN_EPS = 1e-5
CONTAINER_FORMAT = "vitrl-checkpoint"
CONTAINER_VERSION = 1


class CheckpointError(Exception):
    """Missing, corrupt, or incompatible checkpoint container"""


def linear(x, weight, bias=None):
    """y = x W + b with W stored as (D_in, D_out)"""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    y = x @ weight
    return y if bias is None else y + bias


def conv2d(x, kernels, bias=None, stride=1):
    """Valid cross-correlation of (B, C_in, H, W) with (C_out, C_in, k, k) kernels"""
    if x.dim() != 4 or kernels.dim() != 4 or x.shape[1] != kernels.shape[1]:
        raise ValueError(f"conv2d: input {tuple(x.shape)} incompatible with kernels {tuple(kernels.shape)}")
    if x.shape[2] < kernels.shape[2] or x.shape[3] < kernels.shape[3]:
        raise ValueError(f"conv2d: kernel {tuple(kernels.shape[2:])} larger than input {tuple(x.shape[2:])}")
    return F.conv2d(x, kernels, bias, stride=stride)


def layer_norm(x, weight=None, bias=None, eps=LN_EPS):
    """Per-token normalization over the last dim; parameter-free when weight/bias are None"""
    if x.shape[-1] < 2:
        raise ValueError(f"layer_norm needs at least 2 features, got {x.shape[-1]}")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x, dim=-1):
    """Softmax with the max subtracted before exponentiation"""
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    exp = shifted.exp()
    return exp / exp.sum(dim=dim, keepdim=True)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


class Mlp(nn.Module):
    """Linear layers with ReLU between them and no activation on the output"""

    def __init__(self, in_dim, hidden_dims, out_dim, small_output=False):
        super().__init__()
        dims = [in_dim, *hidden_dims, out_dim]
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(d_in, d_out))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        if small_output:
            nn.init.uniform_(self.net[-1].weight, -3e-3, 3e-3)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        return self.net(x)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention with a joint qkv projection"""

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embed dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        for layer in (self.qkv, self.proj):
            nn.init.trunc_normal_(layer.weight, std=0.02)
            nn.init.zeros_(layer.bias)

    def forward(self, x, return_weights=False):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        B, N, C = x.shape
        if C != self.num_heads * self.head_dim:
            raise ValueError(f"attention expects {self.num_heads * self.head_dim} features, got {C}")

        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = softmax(attn, dim=-1)

        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        out = self.proj(out)
        if squeeze:
            out, attn = out.squeeze(0), attn.squeeze(0)
        return (out, attn) if return_weights else out


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x)) with GELU"""

    def __init__(self, dim, num_heads, mlp_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_dim),
            nn.GELU(),
            nn.Linear(mlp_dim, dim),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


# ---------------------------------------------------------------------------
# Optimization state

class ParamStore:
    """
    Named parameters with their Adam moments and a step counter.
    Several stores may share a parameter (the encoder is trained by the critic
    and by the auxiliary task), each keeping its own moments.
    """

    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        if not self.params:
            raise ValueError("ParamStore needs at least one parameter")
        self.optimizer = torch.optim.Adam(list(self.params.values()), lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    @classmethod
    def from_modules(cls, lr, betas=(0.9, 0.999), eps=1e-8, **parts):
        named = {}
        for prefix, part in parts.items():
            if isinstance(part, nn.Parameter):
                named[prefix] = part
            else:
                for name, param in part.named_parameters():
                    named[f"{prefix}.{name}"] = param
        return cls(named, lr, betas, eps)

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=False)

    def gradients(self):
        return {
            name: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
            for name, p in self.params.items()
        }

    def grad_norm(self):
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        if not grads:
            return 0.0
        return float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))

    def state_dict(self):
        return {"optimizer": self.optimizer.state_dict(), "step_count": self.step_count}

    def load_state_dict(self, state):
        self.optimizer.load_state_dict(state["optimizer"])
        self.step_count = state["step_count"]


def adam_step(store, lr=None, beta1=None, beta2=None, eps=None):
    """Bias-corrected Adam update of every parameter in the store, then zero the gradients"""
    for group in store.optimizer.param_groups:
        if lr is not None:
            group["lr"] = lr
        if beta1 is not None or beta2 is not None:
            b1, b2 = group["betas"]
            group["betas"] = (b1 if beta1 is None else beta1, b2 if beta2 is None else beta2)
        if eps is not None:
            group["eps"] = eps
    store.optimizer.step()
    store.step_count += 1
    store.zero_grad()


class EmaShadow:
    """Gradient-free copy of a module that follows its source by Polyak averaging"""

    def __init__(self, source, follow_rate):
        if not 0.0 <= follow_rate <= 1.0:
            raise ValueError(f"follow_rate must lie in [0, 1], got {follow_rate}")
        self.module = copy.deepcopy(source)
        self.module.requires_grad_(False)
        self.follow_rate = follow_rate

    def __call__(self, *args, **kwargs):
        return self.module(*args, **kwargs)

    def state_dict(self):
        return self.module.state_dict()

    def load_state_dict(self, state):
        self.module.load_state_dict(state)


@torch.no_grad()
def ema_update(shadow, source, follow_rate=None):
    """shadow <- (1 - follow_rate) * shadow + follow_rate * source"""
    rate = shadow.follow_rate if follow_rate is None else follow_rate
    shadow_params = list(shadow.module.parameters())
    source_params = list(source.parameters())
    if len(shadow_params) != len(source_params):
        raise ValueError("EMA shadow and source have different parameter lists")
    for target, param in zip(shadow_params, source_params):
        if target.shape != param.shape:
            raise ValueError(f"EMA shape mismatch: {tuple(target.shape)} vs {tuple(param.shape)}")
        target.lerp_(param, rate)


# ---------------------------------------------------------------------------
# Checkpoint container

def save_container(path, payload):
    """
    Write a self-describing checkpoint: parameter tensors by name plus
    optimizer moments, RNG states and counters
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format": CONTAINER_FORMAT, "version": CONTAINER_VERSION, **payload}, tmp)
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint: {path}")


def load_container(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CONTAINER_FORMAT:
        raise CheckpointError(f"{path} is not a {CONTAINER_FORMAT} container")
    if payload.get("version") != CONTAINER_VERSION:
        raise CheckpointError(
            f"Checkpoint version {payload.get('version')} is not supported (expected {CONTAINER_VERSION})"
        )
    return payload
