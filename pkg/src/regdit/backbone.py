"""Pixel-space DiT backbone with register / in-context auxiliary tokens.

Token layout inside the network is ``[aux tokens | patch tokens]``; a
``TokenBatch`` carries the split index. Aux tokens are prepended before block
``reg_start`` and dropped before block ``reg_end + 1`` (or before the head), so
they never reach the reconstruction loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .config import ModelConfig
from .numerics import RMSNorm, SwiGLU, attention, silu


@dataclass
class TokenBatch:
    data: Tensor  # [batch, n_tokens, width]
    split: int = 0  # tokens [0, split) are auxiliary

    @property
    def aux(self) -> Tensor:
        return self.data[:, : self.split]

    @property
    def patches(self) -> Tensor:
        return self.data[:, self.split :]

    @property
    def n_tokens(self) -> int:
        return self.data.shape[1]


@dataclass
class ActivationTrace:
    """Per-block snapshots. ``blocks[l]`` is the output of block ``l``
    (post-residual); ``embed`` is the input to block 0."""

    embed: TokenBatch | None = None
    blocks: list[TokenBatch] = field(default_factory=list)
    attn: list[Tensor | None] = field(default_factory=list)
    grid: int = 0

    def splits(self) -> list[int]:
        return [b.split for b in self.blocks]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"splits": np.asarray(self.splits(), dtype=np.int64),
               "grid": np.asarray(self.grid, dtype=np.int64)}
        if self.embed is not None:
            out["embed"] = self.embed.data.detach().cpu().numpy()
        for i, b in enumerate(self.blocks):
            out[f"block_{i:03d}"] = b.data.detach().cpu().numpy()
            if self.attn[i] is not None:
                out[f"attn_{i:03d}"] = self.attn[i].detach().cpu().numpy()
        return out

    def save(self, path) -> None:
        np.savez(path, version=np.asarray(1), **self.to_arrays())

    @classmethod
    def load(cls, path) -> "ActivationTrace":
        z = np.load(path)
        splits = z["splits"].tolist()
        trace = cls(grid=int(z["grid"]))
        if "embed" in z:
            trace.embed = TokenBatch(torch.from_numpy(z["embed"]), 0)
        for i, s in enumerate(splits):
            trace.blocks.append(TokenBatch(torch.from_numpy(z[f"block_{i:03d}"]), s))
            key = f"attn_{i:03d}"
            trace.attn.append(torch.from_numpy(z[key]) if key in z else None)
        return trace


# --- patching, embeddings ----------------------------------------------------------

def patchify(img: Tensor, patch: int) -> Tensor:
    """[B, C, H, W] -> [B, (H/p)(W/p), p*p*C], row-major over the patch grid."""
    b, c, h, w = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    x = img.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: Tensor, patch: int, channels: int) -> Tensor:
    b, n, _ = tokens.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    x = tokens.reshape(b, g, g, patch, patch, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, g * patch, g * patch)


def sinusoidal_features(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """[..] -> [.., dim] as [cos(t f_i) | sin(t f_i)] with log-spaced f_i."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(t.dtype if t.is_floating_point()
                                                                       else torch.float32)


def pos_embed_2d(width: int, grid: int) -> Tensor:
    """Fixed 2D sin-cos embedding [grid*grid, width]; half the channels encode
    the row, half the column. Channels beyond a multiple of 4 are zero."""
    quarter = width // 4
    out = torch.zeros(grid * grid, width)
    if quarter == 0:
        return out
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float64),
                            torch.arange(grid, dtype=torch.float64), indexing="ij")
    emb_y = sinusoidal_features(ys.reshape(-1), 2 * quarter)
    emb_x = sinusoidal_features(xs.reshape(-1), 2 * quarter)
    out[:, : 4 * quarter] = torch.cat([emb_y, emb_x], dim=-1).float()
    return out


class TimestepEmbedder(nn.Module):
    # t in [0, 1] is scaled to [0, 1000] so the log-spaced frequencies resolve it
    t_scale = 1000.0

    def __init__(self, width: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def features(self, t: Tensor) -> Tensor:
        return sinusoidal_features(t * self.t_scale, self.freq_dim)

    def forward(self, t: Tensor) -> Tensor:
        w = self.mlp[0].weight
        return self.mlp(self.features(t).to(w.dtype))


def timestep_embedding(t: Tensor, dim: int, embedder: TimestepEmbedder | None = None) -> Tensor:
    """Pre-MLP sinusoidal features, or the full embedding when an embedder is given."""
    if embedder is not None:
        return embedder(t)
    if dim % 2:
        raise ValueError("timestep embedding dim must be even")
    return sinusoidal_features(t * TimestepEmbedder.t_scale, dim)


# --- blocks --------------------------------------------------------------------------

def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def joint_attention(qkv: Tensor, heads: int, capture: bool):
    """qkv [B, N, 3w] -> ([B, N, w], weights or None)."""
    q, k, v = (split_heads(z, heads) for z in qkv.chunk(3, dim=-1))
    if capture:
        out, weights = attention(q, k, v, capture=True)
        return merge_heads(out), weights
    return merge_heads(attention(q, k, v)), None


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: Tensor, capture: bool = False):
        out, weights = joint_attention(self.qkv(x), self.heads, capture)
        return self.proj(out), weights


class AdaLN(nn.Module):
    """silu(c) -> 6*width modulations, zero-initialized."""

    def __init__(self, width: int):
        super().__init__()
        self.proj = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, c: Tensor) -> Tensor:
        return self.proj(silu(c))


class Block(nn.Module):
    """adaLN-modulated pre-norm block: RMSNorm, joint attention, SwiGLU MLP."""

    def __init__(self, cfg: ModelConfig, layer: int = 0):
        super().__init__()
        w = cfg.width
        self.layer = layer
        self.norm1 = RMSNorm(w, cfg.norm_eps)
        self.attn = Attention(w, cfg.heads)
        self.norm2 = RMSNorm(w, cfg.norm_eps)
        self.mlp = SwiGLU(w, cfg.mlp_hidden)
        self.adaln = AdaLN(w)

    def reset_special(self):
        """Re-apply zero init to the modulation output after generic init."""
        nn.init.zeros_(self.adaln.proj.weight)
        nn.init.zeros_(self.adaln.proj.bias)

    def forward(self, seq: TokenBatch, c: Tensor, capture: bool = False):
        x = seq.data
        mods = self.adaln(c)[:, None, :].chunk(6, dim=-1)
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        h, weights = self.attn(modulate(self.norm1(x), shift1, scale1), capture)
        x = x + gate1 * h
        x = x + gate2 * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return TokenBatch(x, seq.split), weights


def block_forward(block: nn.Module, seq: TokenBatch, c: Tensor, capture: bool = False):
    out, weights = block(seq, c, capture)
    if not torch.isfinite(out.data).all():
        raise FloatingPointError(f"non-finite activations after block {getattr(block, 'layer', '?')}")
    return out, weights


# --- aux tokens ----------------------------------------------------------------------

def insert_aux_tokens(seq: TokenBatch, layer: int, cfg: ModelConfig, aux: Tensor) -> TokenBatch:
    """Prepend ``aux`` ([B, n_reg, width]) at block ``cfg.reg_start``."""
    if cfg.cond_mode == "none":
        raise ValueError("insert_aux_tokens called with cond_mode none")
    if cfg.n_reg == 0:
        return seq
    if layer != cfg.reg_start:
        raise ValueError(f"aux tokens are inserted at block {cfg.reg_start}, not {layer}")
    if seq.split != 0:
        raise ValueError("sequence already carries aux tokens")
    if aux.shape != (seq.data.shape[0], cfg.n_reg, seq.data.shape[2]):
        raise ValueError(f"aux tokens have shape {tuple(aux.shape)}")
    return TokenBatch(torch.cat([aux.to(seq.data.dtype), seq.data], dim=1), cfg.n_reg)


def remove_aux_tokens(seq: TokenBatch, layer: int, cfg: ModelConfig) -> TokenBatch:
    """Drop aux tokens before block ``cfg.reg_end + 1`` or the head (``layer == depth``)."""
    if cfg.n_reg == 0 or cfg.cond_mode == "none":
        return seq
    if seq.split == 0:
        raise ValueError("remove_aux_tokens called on a sequence without aux tokens")
    if layer not in (cfg.reg_end + 1, cfg.depth):
        raise ValueError(f"aux tokens are removed at block {cfg.reg_end + 1}, not {layer}")
    return TokenBatch(seq.data[:, seq.split :], 0)


# --- model ---------------------------------------------------------------------------

def _init_linear(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class DiT(nn.Module):
    """x-prediction pixel DiT. ``forward(x_t, t, labels)`` returns x_pred;
    label ``num_classes`` is the null (dropped) label."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        from .dualstream import DualBlock, block_is_dual

        self.cfg = cfg
        w = cfg.width
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.patch_embed = nn.Linear(cfg.patch_dim, w)
            self.register_buffer("pos_embed", pos_embed_2d(w, cfg.grid), persistent=False)
            self.t_embed = TimestepEmbedder(w, cfg.freq_dim)
            self.y_embed = nn.Embedding(cfg.num_classes + 1, w)
            if cfg.cond_mode == "registers" and cfg.n_reg > 0:
                self.registers = nn.Parameter(torch.randn(cfg.n_reg, w) * 0.02)
            if cfg.cond_mode == "in_context":
                self.in_context = nn.Embedding(cfg.num_classes + 1, w)
            self.blocks = nn.ModuleList(
                DualBlock(cfg, l) if block_is_dual(cfg, l) else Block(cfg, l)
                for l in range(cfg.depth))
            self.final_norm = RMSNorm(w, cfg.norm_eps)
            self.head = nn.Linear(w, cfg.patch_dim)

            self.apply(_init_linear)
            for blk in self.blocks:
                blk.reset_special()
            nn.init.normal_(self.y_embed.weight, std=0.02)
            if cfg.cond_mode == "in_context":
                nn.init.normal_(self.in_context.weight, std=0.02)
            nn.init.normal_(self.t_embed.mlp[0].weight, std=0.02)
            nn.init.normal_(self.t_embed.mlp[2].weight, std=0.02)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def condition(self, t: Tensor, labels: Tensor) -> Tensor:
        return self.t_embed(t) + self.y_embed(labels)

    def aux_tokens(self, labels: Tensor, batch: int) -> Tensor:
        cfg = self.cfg
        if cfg.cond_mode == "registers":
            return self.registers[None].expand(batch, -1, -1)
        return self.in_context(labels)[:, None, :].expand(-1, cfg.n_reg, -1)

    def embed(self, x_t: Tensor) -> Tensor:
        return self.patch_embed(patchify(x_t, self.cfg.patch)) + self.pos_embed.to(x_t.dtype)

    def forward(self, x_t: Tensor, t: Tensor, labels: Tensor, capture: bool = False):
        cfg = self.cfg
        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=x_t.dtype)
        if t.ndim == 0:
            t = t.expand(b)
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.ndim == 0:
            labels = labels.expand(b)
        seq = TokenBatch(self.embed(x_t), 0)
        c = self.condition(t, labels)
        trace = ActivationTrace(embed=seq, grid=cfg.grid) if capture else None
        for l, blk in enumerate(self.blocks):
            if cfg.has_aux and l == cfg.reg_end + 1:
                seq = remove_aux_tokens(seq, l, cfg)
            if cfg.has_aux and l == cfg.reg_start:
                seq = insert_aux_tokens(seq, l, cfg, self.aux_tokens(labels, b))
            seq, weights = blk(seq, c, capture)
            if trace is not None:
                trace.blocks.append(seq)
                trace.attn.append(weights)
        if seq.split:
            seq = remove_aux_tokens(seq, cfg.depth, cfg)
        out = unpatchify(self.head(self.final_norm(seq.data)), cfg.patch, cfg.channels)
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in model forward")
        if capture:
            return out, trace
        return out


def model_forward(model: DiT, x_t: Tensor, t, label, capture: bool = False):
    return model(x_t, t, label, capture=capture)


# --- parameter and FLOP accounting --------------------------------------------------

def _attn_params(w):
    return 3 * w * w + 3 * w + w * w + w


def _mlp_params(w, h):
    return w * 2 * h + 2 * h + h * w + w


def _dual_extra(cfg: ModelConfig, component: str) -> int:
    """Extra parameters one block gains from dualizing ``component``."""
    w, h, r = cfg.width, cfg.mlp_hidden, cfg.lora_rank
    if cfg.dual.mode == "full_dual":
        return {"adaln": 6 * w * w + 6 * w, "mlp": _mlp_params(w, h), "attention": _attn_params(w),
                "rmsnorm": 2 * w}[component]
    return {"adaln": w * r + r * 6 * w, "mlp": h * w + w, "attention": w * r + r * 3 * w,
            "rmsnorm": 2 * w}[component]


def dual_blocks_for(cfg: ModelConfig, component: str) -> list[int]:
    """Block indices carrying extra parameters for a dualized component."""
    if not cfg.dual.has(component):
        return []
    if (component == "adaln" and cfg.dual.mode == "full_dual"
            and cfg.dual.adaln_full_dual_all_layers):
        return list(range(cfg.depth))
    return [l for l in range(cfg.depth) if cfg.aux_in_block(l)]


def count_params(cfg: ModelConfig) -> dict:
    """Exact parameter count from shapes alone, with a per-component breakdown."""
    w, h, pd = cfg.width, cfg.mlp_hidden, cfg.patch_dim
    emb = (pd * w + w) + (cfg.freq_dim * w + w + w * w + w) + (cfg.num_classes + 1) * w
    if cfg.cond_mode == "registers":
        aux = cfg.n_reg * w
    elif cfg.cond_mode == "in_context":
        aux = (cfg.num_classes + 1) * w
    else:
        aux = 0
    d = cfg.depth
    extras = {c: len(dual_blocks_for(cfg, c)) * _dual_extra(cfg, c)
              for c in ("adaln", "mlp", "attention", "rmsnorm")}
    out = {
        "embeddings": emb,
        "attn": d * _attn_params(w),
        "mlp": d * _mlp_params(w, h),
        "adaln": d * (6 * w * w + 6 * w),
        "norm": d * 2 * w,
        "head": w + w * pd + pd,
        "registers": aux,
        "dual_extras": sum(extras.values()),
    }
    out["total"] = sum(out.values())
    out["dual_extras_by_component"] = extras
    return out


def estimate_flops(cfg: ModelConfig) -> dict:
    """Forward cost per image in GFLOPs, counting one multiply-accumulate as
    one FLOP (the convention of the reference tables)."""
    w, h, pd, r = cfg.width, cfg.mlp_hidden, cfg.patch_dim, cfg.lora_rank
    n = cfg.n_patch
    terms = {"embed": n * pd * w, "head": n * w * pd,
             "t_embed": cfg.freq_dim * w + w * w, "qkv": 0, "attn_scores": 0, "attn_apply": 0,
             "proj": 0, "mlp": 0, "adaln": 0, "lora": 0}
    for l in range(cfg.depth):
        tok = cfg.tokens_in_block(l)
        n_aux = tok - n
        terms["qkv"] += tok * w * 3 * w
        terms["attn_scores"] += tok * tok * w
        terms["attn_apply"] += tok * tok * w
        terms["proj"] += tok * w * w
        terms["mlp"] += tok * (w * 2 * h + h * w)
        terms["adaln"] += w * 6 * w
        if cfg.dual.mode == "full_dual" and l in dual_blocks_for(cfg, "adaln"):
            terms["adaln"] += w * 6 * w
        if cfg.dual.mode == "compact_dual":
            if l in dual_blocks_for(cfg, "adaln"):
                terms["lora"] += w * r + r * 6 * w
            if l in dual_blocks_for(cfg, "attention"):
                terms["lora"] += n_aux * (w * r + r * 3 * w)
    total = sum(terms.values())
    return {"gflops": total / 1e9, "terms": {k: v / 1e9 for k, v in terms.items()}}
