"""Flow matching with x-prediction on x_t = t*x + (1-t)*eps (t = 1 is clean
data), and an Euler ODE sampler with classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

CLAMP = 1e-3


@dataclass
class FlowSample:
    x: Tensor
    eps: Tensor
    t: Tensor  # [B]
    x_t: Tensor

    @property
    def target(self) -> Tensor:
        return self.x


def _bcast(t: Tensor, like: Tensor) -> Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def sample_time(n: int, dist: str = "logit_normal", generator: torch.Generator | None = None,
                mu: float = 0.0, sigma: float = 1.0) -> Tensor:
    """Draw ``n`` times in the open interval (0, 1)."""
    if dist == "uniform":
        t = torch.rand(n, generator=generator, dtype=torch.float64)
        # rand is [0, 1); keep the endpoints out
        t = t.clamp(torch.finfo(torch.float64).tiny, 1 - 2**-53)
    elif dist == "logit_normal":
        if sigma <= 0:
            raise ValueError("logit_normal sigma must be > 0")
        z = torch.randn(n, generator=generator, dtype=torch.float64) * sigma + mu
        t = torch.sigmoid(z).clamp(2**-53, 1 - 2**-53)
    else:
        raise ValueError(f"unknown time distribution {dist!r}")
    return t.float()


def forward_process(x: Tensor, eps: Tensor, t) -> Tensor:
    if x.shape != eps.shape:
        raise ValueError(f"x{tuple(x.shape)} and eps{tuple(eps.shape)} differ")
    t = _bcast(t, x)
    return t * x + (1 - t) * eps


def make_sample(x: Tensor, eps: Tensor, t: Tensor) -> FlowSample:
    return FlowSample(x=x, eps=eps, t=t, x_t=forward_process(x, eps, t))


def xpred_loss(x_pred: Tensor, x: Tensor) -> Tensor:
    """Pixel MSE. Only the unpatchified patch reconstruction enters."""
    if x_pred.shape != x.shape:
        raise ValueError(f"x_pred{tuple(x_pred.shape)} and x{tuple(x.shape)} differ")
    loss = (x_pred - x).pow(2).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite x-prediction loss")
    return loss


def velocity_from_xpred(x_pred: Tensor, x_t: Tensor, t) -> Tensor:
    """v = (x_pred - x_t) / max(1 - t, 1e-3), the interpolant's dx_t/dt."""
    denom = (1 - _bcast(t, x_t)).clamp_min(CLAMP)
    return (x_pred - x_t) / denom


def euler_step(x: Tensor, x_pred: Tensor, t: float, t_next: float) -> Tensor:
    """x + (t_next - t) * v, written as a convex blend so the final step onto
    t = 1 lands exactly on x_pred."""
    beta = (t_next - t) / max(1.0 - t, CLAMP)
    return (1.0 - beta) * x + beta * x_pred


@torch.no_grad()
def euler_sample(model, labels: Tensor, steps: int, guidance: float,
                 generator: torch.Generator | None = None, shape=None, null_label: int | None = None,
                 dtype=torch.float32) -> Tensor:
    """Integrate from noise (t = 0) to data (t = 1).

    ``model(x, t, labels)`` returns x_pred. With ``guidance > 0`` the guided
    prediction is ``x_null + guidance * (x_cond - x_null)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if shape is None:
        cfg = model.cfg
        shape = (labels.shape[0], cfg.channels, cfg.image, cfg.image)
    if null_label is None and guidance > 0:
        null_label = model.cfg.num_classes
    x = torch.randn(shape, generator=generator, dtype=dtype)
    b = shape[0]
    null = torch.full_like(labels, null_label) if guidance > 0 else None
    for k in range(steps):
        t = k / steps
        t_next = (k + 1) / steps
        tt = torch.full((b,), t, dtype=dtype)
        if guidance > 0:
            pred = model(torch.cat([x, x]), torch.cat([tt, tt]), torch.cat([labels, null]))
            cond, uncond = pred.chunk(2)
            x_pred = uncond + guidance * (cond - uncond)
        else:
            x_pred = model(x, tt, labels)
        x = euler_step(x, x_pred, t, t_next)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sampler state at step {k}")
    return x.clamp(-1, 1)
