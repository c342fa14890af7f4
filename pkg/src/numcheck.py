"""
Verification oracles for the test suite: central finite differences and
brute-force loop evaluations of the InfoNCE loss and multi-head attention.
Everything here runs in double precision.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

REL_DENOM_FLOOR = 1e-8


@dataclass
class GradReport:
    """Per-parameter comparison of autograd against finite differences"""
    max_rel_error: dict = field(default_factory=dict)
    worst_index: dict = field(default_factory=dict)
    tolerance: float = 1e-5
    passed: bool = True

    def summary(self):
        worst = max(self.max_rel_error, key=self.max_rel_error.get) if self.max_rel_error else None
        status = "PASS" if self.passed else "FAIL"
        if worst is None:
            return f"{status}: no parameters"
        return f"{status}: worst {worst} rel err {self.max_rel_error[worst]:.3e} at {self.worst_index[worst]}"


def relative_error(a, b):
    """|a - b| / max(|a|, |b|, 1e-8), elementwise"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_DENOM_FLOOR)


def _evaluate(loss_fn):
    with torch.no_grad():
        value = float(loss_fn())
    if not math.isfinite(value):
        raise FloatingPointError(f"loss is not finite: {value}")
    return value


def _as_list(params):
    if isinstance(params, dict):
        return list(params.keys()), list(params.values())
    params = list(params)
    return [f"param{i}" for i in range(len(params))], params


def finite_diff_grad(loss_fn, params, eps=1e-4):
    """
    Central differences (f(p + eps) - f(p - eps)) / (2 eps) for every element

    Args:
        loss_fn (callable): Pure, deterministic zero-argument function returning a scalar
        params (list | dict): Tensors perturbed in place and restored afterwards
        eps (float): Step size

    Returns:
        list: Numeric gradients shaped like each parameter (float64 numpy arrays)

    Raises:
        FloatingPointError: If the loss is not finite at any evaluated point
    """
    _, tensors = _as_list(params)
    grads = []
    for p in tensors:
        grad = np.zeros(tuple(p.shape), dtype=np.float64)
        flat = p.data.view(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            f_plus = _evaluate(loss_fn)
            flat[i] = original - eps
            f_minus = _evaluate(loss_fn)
            flat[i] = original
            flat_grad[i] = (f_plus - f_minus) / (2 * eps)
        grads.append(grad)
    return grads


def analytic_grad(loss_fn, params):
    """Autograd gradients of loss_fn with respect to params, zeros where unused"""
    _, tensors = _as_list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return [
        np.zeros(tuple(p.shape)) if g is None else g.detach().double().cpu().numpy()
        for p, g in zip(tensors, grads)
    ]


def check_gradients(loss_fn, params, eps=1e-4, tol=1e-5, atol=1e-9):
    """
    Compare autograd against central differences

    An element passes when its relative error is below tol or its absolute
    error is below atol (both sides numerically zero).

    Returns:
        GradReport: Worst relative error and its index per parameter
    """
    names, tensors = _as_list(params)
    analytic = analytic_grad(loss_fn, tensors)
    numeric = finite_diff_grad(loss_fn, tensors, eps)

    report = GradReport(tolerance=tol)
    for name, a, n in zip(names, analytic, numeric):
        err = relative_error(a, n)
        err = np.where(np.abs(a - n) < atol, 0.0, err)
        flat_idx = int(np.argmax(err)) if err.size else 0
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.worst_index[name] = tuple(int(i) for i in np.unravel_index(flat_idx, err.shape)) if err.size else ()
        if report.max_rel_error[name] >= tol:
            report.passed = False
    return report


def non_smooth_elements(loss_fn, params, eps=1e-4, tol=1e-3):
    """
    Flag elements where the one-sided differences disagree (kinks such as |x| at 0)

    Returns:
        list: (parameter name, element index) pairs
    """
    names, tensors = _as_list(params)
    center = _evaluate(loss_fn)
    flagged = []
    for name, p in zip(names, tensors):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            forward = (_evaluate(loss_fn) - center) / eps
            flat[i] = original - eps
            backward = (center - _evaluate(loss_fn)) / eps
            flat[i] = original
            if abs(forward - backward) > tol * max(1.0, abs(forward), abs(backward)):
                flagged.append((name, tuple(int(j) for j in np.unravel_index(i, tuple(p.shape)))))
    return flagged


def _to_float64(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().double().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def brute_force_infonce(queries, keys, W):
    """
    Unstabilized InfoNCE by explicit loops: mean over i of
    -log(exp(q_i W k_i) / sum_j exp(q_i W k_j))

    Raises:
        OverflowError: If any exponential overflows
    """
    q, k, w = _to_float64(queries), _to_float64(keys), _to_float64(W)
    B, D = q.shape
    total = 0.0
    for i in range(B):
        exps = []
        for j in range(B):
            logit = 0.0
            for a in range(D):
                for b in range(D):
                    logit += q[i, a] * w[a, b] * k[j, b]
            value = math.exp(logit)
            if math.isinf(value):
                raise OverflowError(f"exp({logit}) overflows at pair ({i}, {j})")
            exps.append(value)
        total += -math.log(exps[i] / sum(exps))
    return total / B


def attention_params(module):
    """Pull a MultiHeadAttention's weights out as float64 arrays"""
    return {
        "qkv_weight": _to_float64(module.qkv.weight),
        "qkv_bias": _to_float64(module.qkv.bias),
        "proj_weight": _to_float64(module.proj.weight),
        "proj_bias": _to_float64(module.proj.bias),
        "num_heads": module.num_heads,
    }


def brute_force_attention(tokens, params):
    """
    Multi-head self-attention evaluated pair by pair

    Args:
        tokens: (N, D) input
        params (dict): Output of attention_params (torch Linear layout, out x in)

    Returns:
        numpy.ndarray: (N, D) output
    """
    x = _to_float64(tokens)
    N, D = x.shape
    heads = params["num_heads"]
    hd = D // heads
    scale = hd ** -0.5

    def affine(weight, bias, vec):
        return [sum(weight[o, c] * vec[c] for c in range(len(vec))) + bias[o] for o in range(len(bias))]

    qkv = [affine(params["qkv_weight"], params["qkv_bias"], x[n]) for n in range(N)]
    mixed = np.zeros((N, D))
    for h in range(heads):
        q_cols = range(h * hd, (h + 1) * hd)
        k_cols = range(D + h * hd, D + (h + 1) * hd)
        v_cols = range(2 * D + h * hd, 2 * D + (h + 1) * hd)
        for i in range(N):
            scores = []
            for j in range(N):
                dot = sum(qkv[i][qc] * qkv[j][kc] for qc, kc in zip(q_cols, k_cols))
                scores.append(math.exp(dot * scale))
            norm = sum(scores)
            for j in range(N):
                weight = scores[j] / norm
                for d, vc in enumerate(v_cols):
                    mixed[i, h * hd + d] += weight * qkv[j][vc]

    out = [affine(params["proj_weight"], params["proj_bias"], mixed[n]) for n in range(N)]
    return np.asarray(out)
