"""Dual-stream components: register and patch tokens get (partly) separate
parameters while still attending jointly.

Two families are supported, selected by ``DualConfig.mode``:

* ``full_dual``: a complete second copy of each dualized component, applied
  row-wise to register tokens.
* ``compact_dual``: separate RMSNorm weights, a second SwiGLU output
  projection over a shared hidden layer, and LoRA branches for adaLN and the
  qkv projection.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .backbone import (AdaLN, Attention, Block, TokenBatch, dual_blocks_for, joint_attention,
                       modulate)
from .config import ModelConfig
from .numerics import Lora, SwiGLU, rmsnorm, silu


def _merge(reg: Tensor, patch: Tensor) -> Tensor:
    return torch.cat([reg, patch], dim=1)


def dual_rmsnorm(x: TokenBatch, w_patch: Tensor, w_reg: Tensor, eps_patch: float,
                 eps_reg: float) -> TokenBatch:
    s = x.split
    patch = rmsnorm(x.patches, w_patch, eps_patch)
    if s == 0:
        return TokenBatch(patch, 0)
    return TokenBatch(_merge(rmsnorm(x.aux, w_reg, eps_reg), patch), s)


def dual_swiglu(x: TokenBatch, first_proj: nn.Linear, out_patch: nn.Linear,
                out_reg: nn.Linear) -> TokenBatch:
    """Shared silu(x1) * x2 hidden layer, stream-specific output projections."""
    if first_proj.out_features % 2:
        raise ValueError("SwiGLU first projection must have an even output width")
    x1, x2 = first_proj(x.data).chunk(2, dim=-1)
    hidden = silu(x1) * x2
    s = x.split
    y_patch = out_patch(hidden[:, s:])
    if s == 0:
        return TokenBatch(y_patch, 0)
    return TokenBatch(_merge(out_reg(hidden[:, :s]), y_patch), s)


def split_mods(m: Tensor) -> tuple[Tensor, ...]:
    """[B, 6w] -> (shift, scale, gate) for attention then MLP."""
    return m.chunk(6, dim=-1)


def dual_adaln(c: Tensor, shared_proj: nn.Linear, lora: Lora | None = None,
               reg_proj: nn.Linear | None = None):
    """Return (patch modulations, register modulations) as 6-tuples of [B, w].

    The register stream uses ``m + lora(c)``, a separate full projection
    ``reg_proj(silu(c))``, or the shared modulation when neither is given.
    """
    m = shared_proj(silu(c))
    if reg_proj is not None:
        m_r = reg_proj(silu(c))
    elif lora is not None:
        m_r = m + lora(c)
    else:
        m_r = m
    return split_mods(m), split_mods(m_r)


def lora_attention(x: TokenBatch, qkv: nn.Linear, out_proj: nn.Linear, heads: int,
                   attn_lora: Lora | None, capture: bool = False):
    """Shared qkv and output projection; register rows of qkv get a LoRA delta."""
    s = x.split
    q = qkv(x.data)
    if s and attn_lora is not None:
        q = _merge(q[:, :s] + attn_lora(x.aux), q[:, s:])
    out, weights = joint_attention(q, heads, capture)
    return TokenBatch(out_proj(out), s), weights


def full_dual_attention(x: TokenBatch, attn_patch: Attention, attn_reg: Attention, heads: int,
                        capture: bool = False):
    s = x.split
    if s == 0:
        out, weights = attn_patch(x.data, capture)
        return TokenBatch(out, 0), weights
    q = _merge(attn_reg.qkv(x.aux), attn_patch.qkv(x.patches))
    out, weights = joint_attention(q, heads, capture)
    return TokenBatch(_merge(attn_reg.proj(out[:, :s]), attn_patch.proj(out[:, s:])), s), weights


def _stream_tensor(reg: Tensor, patch: Tensor, split: int, n: int) -> Tensor:
    """Per-token modulation [B, N, w] (or [B, 1, w] when both streams agree)."""
    if split == 0 or reg is patch:
        return patch[:, None, :]
    return torch.cat([reg[:, None, :].expand(-1, split, -1),
                      patch[:, None, :].expand(-1, n - split, -1)], dim=1)


def block_is_dual(cfg: ModelConfig, layer: int) -> bool:
    if cfg.dual.mode == "single":
        return False
    return any(layer in dual_blocks_for(cfg, c) for c in cfg.dual.dualize)


class DualBlock(Block):
    """Block whose components are swapped for dual variants per ``cfg.dual``.

    Register-stream parameters start tied to the shared ones (and LoRA B at
    zero), so a freshly built dual model computes the single-stream function.
    """

    def __init__(self, cfg: ModelConfig, layer: int = 0):
        super().__init__(cfg, layer)
        w, h, r = cfg.width, cfg.mlp_hidden, cfg.lora_rank
        self.mode = cfg.dual.mode
        self.heads = cfg.heads
        self.eps = cfg.norm_eps
        here = {c for c in cfg.dual.dualize if layer in dual_blocks_for(cfg, c)}
        self.components = frozenset(here)
        full = self.mode == "full_dual"
        if "adaln" in here:
            if full:
                self.adaln_reg = AdaLN(w)
            else:
                self.adaln_lora = Lora(w, 6 * w, r)
        if "mlp" in here:
            if full:
                self.mlp_reg = SwiGLU(w, h)
            else:
                self.fc2_reg = nn.Linear(h, w)
        if "attention" in here:
            if full:
                self.attn_reg = Attention(w, cfg.heads)
            else:
                self.attn_lora = Lora(w, 3 * w, r)
        if "rmsnorm" in here:
            self.norm1_reg_weight = nn.Parameter(torch.ones(w))
            self.norm2_reg_weight = nn.Parameter(torch.ones(w))

    def reset_special(self):
        super().reset_special()
        with torch.no_grad():
            if hasattr(self, "adaln_lora"):
                nn.init.normal_(self.adaln_lora.A, std=0.02)
            if hasattr(self, "attn_lora"):
                nn.init.normal_(self.attn_lora.A, std=0.02)
        self.tie_to_shared()

    @torch.no_grad()
    def tie_to_shared(self):
        """Copy shared weights into every register-stream copy; zero LoRA B."""
        if hasattr(self, "adaln_reg"):
            self.adaln_reg.load_state_dict(self.adaln.state_dict())
        if hasattr(self, "adaln_lora"):
            self.adaln_lora.B.zero_()
        if hasattr(self, "mlp_reg"):
            self.mlp_reg.load_state_dict(self.mlp.state_dict())
        if hasattr(self, "fc2_reg"):
            self.fc2_reg.load_state_dict(self.mlp.fc2.state_dict())
        if hasattr(self, "attn_reg"):
            self.attn_reg.load_state_dict(self.attn.state_dict())
        if hasattr(self, "attn_lora"):
            self.attn_lora.B.zero_()
        if hasattr(self, "norm1_reg_weight"):
            self.norm1_reg_weight.copy_(self.norm1.weight)
            self.norm2_reg_weight.copy_(self.norm2.weight)

    def _norm(self, x: TokenBatch, shared: nn.Module, reg_weight: str) -> Tensor:
        if hasattr(self, reg_weight):
            w_reg = getattr(self, reg_weight)
            return dual_rmsnorm(x, shared.weight, w_reg, shared.eps, self.eps).data
        return shared(x.data)

    def forward(self, seq: TokenBatch, c: Tensor, capture: bool = False):
        x, s = seq.data, seq.split
        n = x.shape[1]
        mods_p, mods_r = dual_adaln(c, self.adaln.proj, getattr(self, "adaln_lora", None),
                                    self.adaln_reg.proj if hasattr(self, "adaln_reg") else None)
        shift1, scale1, gate1, shift2, scale2, gate2 = (
            _stream_tensor(r, p, s, n) for r, p in zip(mods_r, mods_p))

        h = modulate(self._norm(seq, self.norm1, "norm1_reg_weight"), shift1, scale1)
        hb = TokenBatch(h, s)
        if hasattr(self, "attn_reg"):
            a, weights = full_dual_attention(hb, self.attn, self.attn_reg, self.heads, capture)
        else:
            a, weights = lora_attention(hb, self.attn.qkv, self.attn.proj, self.heads,
                                        getattr(self, "attn_lora", None), capture)
        x = x + gate1 * a.data

        xb = TokenBatch(x, s)
        h = modulate(self._norm(xb, self.norm2, "norm2_reg_weight"), shift2, scale2)
        hb = TokenBatch(h, s)
        if hasattr(self, "mlp_reg"):
            m = self.mlp(h[:, s:]) if s == 0 else _merge(self.mlp_reg(h[:, :s]), self.mlp(h[:, s:]))
        elif hasattr(self, "fc2_reg"):
            m = dual_swiglu(hb, self.mlp.fc1, self.mlp.fc2, self.fc2_reg).data
        else:
            m = self.mlp(h)
        x = x + gate2 * m
        return TokenBatch(x, s), weights


def dual_block_forward(block: DualBlock, seq: TokenBatch, c: Tensor, capture: bool = False):
    out, weights = block(seq, c, capture)
    if not torch.isfinite(out.data).all():
        raise FloatingPointError(f"non-finite activations after dual block {block.layer}")
    return out, weights
