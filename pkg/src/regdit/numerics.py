"""Numerical primitives shared by the single- and dual-stream blocks.

Everything here is a pure function of its inputs. Gradients come from torch
autograd; ``grad_check`` is an independent central-difference harness used to
verify them in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import torch
from torch import Tensor, nn
from torch.nn import functional as F

DEFAULT_EPS = 1e-6


def rmsnorm(x: Tensor, w: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * w over the last dim."""
    if w.shape[-1] != x.shape[-1]:
        raise ValueError(f"rmsnorm weight has {w.shape[-1]} entries, input last dim is {x.shape[-1]}")
    return F.rms_norm(x, (x.shape[-1],), w, eps)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    return F.silu(x)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dim (max-subtracted inside the kernel)."""
    return torch.softmax(x, dim=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, capture: bool = False):
    """Scaled dot-product attention over [B, heads, N, d] tensors.

    Returns ``out`` or ``(out, weights)`` when ``capture`` is set; ``weights``
    is the post-softmax [B, heads, N, N] matrix.
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise ValueError(f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = (q * (1.0 / math.sqrt(q.shape[-1]))) @ k.transpose(-2, -1)
    weights = softmax(scores)
    out = weights @ v
    if capture:
        return out, weights
    return out


def lora_apply(x: Tensor, a: Tensor, b: Tensor, alpha: float = 1.0) -> Tensor:
    """Low-rank delta alpha * (x @ A) @ B with A [in, r] and B [r, out]."""
    if x.shape[-1] != a.shape[0] or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"lora shape mismatch: x[..., {x.shape[-1]}] A{tuple(a.shape)} B{tuple(b.shape)}")
    return alpha * ((x @ a) @ b)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = DEFAULT_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        return rmsnorm(x, self.weight, self.eps)


class Lora(nn.Module):
    """Low-rank adapter. B starts at zero so the branch is inactive at init."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float = 1.0, std: float = 0.02):
        super().__init__()
        self.rank = rank
        self.alpha = alpha
        self.A = nn.Parameter(torch.randn(d_in, rank) * std)
        self.B = nn.Parameter(torch.zeros(rank, d_out))

    def forward(self, x: Tensor) -> Tensor:
        return lora_apply(x, self.A, self.B, self.alpha)

    def dense(self) -> Tensor:
        return self.alpha * (self.A @ self.B)


class SwiGLU(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, 2 * hidden)
        self.fc2 = nn.Linear(hidden, width)

    def hidden(self, x: Tensor) -> Tensor:
        x1, x2 = self.fc1(x).chunk(2, dim=-1)
        return silu(x1) * x2

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.hidden(x))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               max_entries: int | None = None) -> float:
    """Compare autograd against central differences.

    ``f`` is a zero-argument closure returning a scalar that depends on the
    (float64, requires_grad) tensors in ``params``. Returns
    max |analytic - numeric| / (|analytic| + 1e-8) over all checked entries.
    ``max_entries`` caps the entries probed per tensor (evenly strided).
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss in grad_check")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            stride = 1 if max_entries is None or n <= max_entries else n // max_entries
            for i in range(0, n, stride):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError("non-finite loss under perturbation")
                numeric = (up - down) / (2 * eps)
                a = gflat[i].item()
                worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst
