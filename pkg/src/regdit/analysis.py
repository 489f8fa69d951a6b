"""Measurement suite over activation traces: token norms, Total Variation,
linear probes, register attention maps, PCA colorings and the correlation
decay slope. All functions are read-only over their inputs."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .backbone import ActivationTrace, DiT, TokenBatch
from .flow import forward_process

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def _np(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# --- trace collection ----------------------------------------------------------------

@torch.no_grad()
def collect_trace(model: DiT, images: Tensor, labels: Tensor, t: float, seed: int = 0,
                  batch: int = 64) -> ActivationTrace:
    """Run ``model`` on x_t built from ``images`` at a fixed ``t`` (noise from
    ``seed``) and concatenate the per-block snapshots over mini-batches."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
    x_t = forward_process(images, eps, t)
    parts = []
    for lo in range(0, images.shape[0], batch):
        sl = slice(lo, lo + batch)
        _, tr = model(x_t[sl], torch.full((x_t[sl].shape[0],), float(t)), labels[sl], capture=True)
        parts.append(tr)
    merged = ActivationTrace(grid=parts[0].grid)
    merged.embed = TokenBatch(torch.cat([p.embed.data for p in parts]), 0)
    for l in range(len(parts[0].blocks)):
        merged.blocks.append(TokenBatch(torch.cat([p.blocks[l].data for p in parts]),
                                        parts[0].blocks[l].split))
        merged.attn.append(torch.cat([p.attn[l] for p in parts]))
    return merged


def patch_grid(seq: TokenBatch, grid: int) -> Tensor:
    """Patch rows of a snapshot as [B, grid, grid, width]; aux rows dropped."""
    p = seq.patches
    return p.reshape(p.shape[0], grid, grid, p.shape[-1])


# --- norms ---------------------------------------------------------------------------

@dataclass
class NormProfile:
    layers: list[np.ndarray]  # mean L2 norm per token, one array per block
    splits: list[int]
    embed: np.ndarray | None = None

    def stream(self, layer: int) -> list[str]:
        s = self.splits[layer]
        return ["aux"] * s + ["patch"] * (len(self.layers[layer]) - s)

    def aux_norms(self, layer: int) -> np.ndarray:
        return self.layers[layer][: self.splits[layer]]

    def patch_norms(self, layer: int) -> np.ndarray:
        return self.layers[layer][self.splits[layer] :]

    def rows(self) -> list[dict]:
        out = []
        for l, norms in enumerate(self.layers):
            for i, (v, tag) in enumerate(zip(norms, self.stream(l))):
                out.append({"layer": l, "token": i, "stream": tag, "norm": float(v)})
        return out


def token_norms(trace: ActivationTrace) -> NormProfile:
    if not trace.blocks:
        raise ValueError("empty trace")
    layers = [_np(b.data.double().norm(dim=-1).mean(0)) for b in trace.blocks]
    embed = _np(trace.embed.data.double().norm(dim=-1).mean(0)) if trace.embed is not None else None
    return NormProfile(layers, trace.splits(), embed)


# --- total variation -----------------------------------------------------------------

def total_variation(featmap) -> float:
    """Mean over horizontal and vertical neighbor pairs of the channel-mean
    absolute difference, for a [grid_h, grid_w, width] map."""
    f = torch.as_tensor(featmap).double()
    if f.ndim == 2:
        f = f[..., None]
    return float(tv_batch(f[None])[0])


def tv_batch(f: Tensor) -> Tensor:
    """Total variation of each map in a [B, gh, gw, C] batch."""
    b, gh, gw, _ = f.shape
    if gh < 2 and gw < 2:
        raise ValueError("total variation needs a grid of at least 2 in one dimension")
    f = f.double()
    dh = (f[:, :, 1:] - f[:, :, :-1]).abs().mean(-1)  # [B, gh, gw-1]
    dv = (f[:, 1:] - f[:, :-1]).abs().mean(-1)  # [B, gh-1, gw]
    n_pairs = gh * (gw - 1) + (gh - 1) * gw
    return (dh.sum((1, 2)) + dv.sum((1, 2))) / n_pairs


def tv_profile(trace: ActivationTrace) -> np.ndarray:
    """Per-block TV of patch features, averaged over images."""
    return np.asarray([float(tv_batch(patch_grid(b, trace.grid)).mean()) for b in trace.blocks])


@dataclass
class TVRatio:
    ratios: list[float]
    tv_with: list[float]
    tv_without: list[float]
    zero_denominator: list[int] = field(default_factory=list)


def tv_ratio(model_with: DiT, model_without: DiT, images: Tensor, labels: Tensor, t: float,
             seed: int = 0) -> TVRatio:
    """Per-block TV(with) / TV(without) at fixed t, both on the same noise."""
    if model_with.cfg.depth != model_without.cfg.depth:
        raise ValueError("tv_ratio models must share depth")
    if images.shape[0] < 1:
        raise ValueError("tv_ratio needs at least one image")
    tv_w = tv_profile(collect_trace(model_with, images, labels, t, seed))
    tv_wo = tv_profile(collect_trace(model_without, images, labels, t, seed))
    ratios, flagged = [], []
    for l, (a, b) in enumerate(zip(tv_w, tv_wo)):
        if b == 0:
            flagged.append(l)
            ratios.append(float("nan"))
        else:
            ratios.append(float(a / b))
    return TVRatio(ratios, tv_w.tolist(), tv_wo.tolist(), flagged)


# --- linear probing ------------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: list[float]
    mean_norm: list[float]
    layer: int


def default_probe_layer(depth: int) -> int:
    """Trace index of the block after which features are probed: the
    floor(depth*5/12)-th block, counted from one."""
    return max(0, depth * 5 // 12 - 1)


def _softmax_regression(x: np.ndarray, y: np.ndarray, num_classes: int, l2: float,
                        tol: float, max_iter: int) -> tuple[np.ndarray, np.ndarray]:
    n, d = x.shape
    onehot = np.eye(num_classes)[y]
    # step 1/L with L bounding the Hessian of mean cross-entropy + l2
    lam_max = float(np.linalg.eigvalsh(x.T @ x / n).max()) if d else 0.0
    step = 1.0 / (0.5 * (lam_max + 1.0) + l2)
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    for _ in range(max_iter):
        z = x @ w + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / n
        gw = x.T @ g + l2 * w
        gb = g.sum(0)
        w -= step * gw
        b -= step * gb
        if math.sqrt(float((gw**2).sum() + (gb**2).sum())) < tol:
            break
    return w, b


def linear_probe(features, labels, num_classes: int | None = None, layer: int = -1,
                 l2: float = 1e-3, seed: int = 0, train_frac: float = 0.8, tol: float = 1e-6,
                 max_iter: int = 3000) -> ProbeResult:
    """Softmax-regression probe per token.

    ``features`` is [N, width] (one token) or [tokens, N, width]. Features are
    z-scored with train-split statistics; accuracy is measured on the held-out
    split.
    """
    f = _np(features).astype(np.float64)
    if f.ndim == 2:
        f = f[None]
    y = _np(labels).astype(np.int64)
    n = f.shape[1]
    if y.shape[0] != n:
        raise ValueError("features and labels disagree on N")
    num_classes = int(y.max()) + 1 if num_classes is None else num_classes
    if n < num_classes:
        raise ValueError("need at least as many samples as classes")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_frac * n))
    tr, te = perm[:n_train], perm[n_train:]
    if len(np.unique(y[tr])) < 2:
        raise ValueError("degenerate probe split: training labels contain a single class")
    accs, norms = [], []
    for tok in f:
        mu = tok[tr].mean(0)
        sd = tok[tr].std(0)
        sd[sd < 1e-12] = 1.0
        z = (tok - mu) / sd
        w, b = _softmax_regression(z[tr], y[tr], num_classes, l2, tol, max_iter)
        pred = (z[te] @ w + b).argmax(1)
        accs.append(float((pred == y[te]).mean()))
        norms.append(float(np.linalg.norm(tok, axis=1).mean()))
    return ProbeResult(accs, norms, layer)


def aux_features(trace: ActivationTrace, layer: int) -> Tensor:
    """[n_aux, N, width] aux-token features at a block output."""
    snap = trace.blocks[layer]
    if snap.split == 0:
        raise ValueError(f"block {layer} carries no auxiliary tokens")
    return snap.aux.transpose(0, 1)


# --- attention maps ------------------------------------------------------------------

def attention_map(trace: ActivationTrace, layer: int, query_token: int,
                  image: int | None = 0) -> np.ndarray:
    """Head-averaged attention of ``query_token`` over patch columns,
    renormalized to sum to 1 and shaped [grid, grid]. ``image=None`` averages
    over the batch."""
    if layer >= len(trace.attn) or trace.attn[layer] is None:
        raise ValueError(f"no attention weights captured at block {layer}")
    w = trace.attn[layer].double()  # [B, H, N, N]
    split = trace.blocks[layer].split
    row = w[:, :, query_token, split:].mean(1)  # [B, n_patch]
    row = row.mean(0) if image is None else row[image]
    row = row / row.sum()
    g = trace.grid
    return _np(row.reshape(g, g))


# --- PCA -----------------------------------------------------------------------------

def pca_directions(x, k: int = 3, tol: float = 1e-8, max_iter: int = 10000,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-k principal directions of mean-centered rows of ``x`` [n, d] by
    power iteration with deflation. Returns (components [k, d], variances [k]);
    directions beyond the data rank are zero."""
    x = _np(x).astype(np.float64)
    x = x - x.mean(0)
    cov = x.T @ x / x.shape[0]
    d = cov.shape[0]
    scale = max(float(np.trace(cov)), 1e-300)
    rng = np.random.default_rng(seed)
    comps, vals = np.zeros((k, d)), np.zeros(k)
    for i in range(min(k, d)):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            u = cov @ v
            nu = np.linalg.norm(u)
            if nu <= 1e-14 * scale:
                v = np.zeros(d)
                break
            u /= nu
            if u @ v < 0:
                u = -u
            done = np.linalg.norm(u - v) < tol
            v = u
            if done:
                break
        lam = float(v @ cov @ v)
        if lam <= 1e-12 * scale:
            break
        comps[i], vals[i] = v, lam
        cov = cov - lam * np.outer(v, v)
    return comps, vals


def pca_rgb(featmap) -> np.ndarray:
    """[gh, gw, C] features -> [gh, gw, 3] image in [0, 1] from the top three
    principal components, each min-max scaled (flat channels map to 0.5)."""
    f = _np(featmap).astype(np.float64)
    gh, gw, c = f.shape
    if c < 3:
        raise ValueError("pca_rgb needs width >= 3")
    x = f.reshape(-1, c)
    comps, vals = pca_directions(x, 3)
    if (vals <= 0).any():
        warnings.warn("feature map has rank < 3; missing PCA channels are constant", RuntimeWarning)
    proj = (x - x.mean(0)) @ comps.T
    out = np.empty_like(proj)
    for j in range(3):
        lo, hi = proj[:, j].min(), proj[:, j].max()
        out[:, j] = 0.5 if hi - lo <= 1e-12 * max(1.0, abs(hi)) else (proj[:, j] - lo) / (hi - lo)
    return out.reshape(gh, gw, 3)


# --- correlation decay ----------------------------------------------------------------

def corr_decay_curve(featmaps) -> tuple[np.ndarray, np.ndarray]:
    """Mean Pearson correlation between position feature vectors, binned by
    rounded Euclidean distance 1..grid//2. Returns (distances, mean corr)."""
    f = _np(featmaps).astype(np.float64)
    if f.ndim == 3:
        f = f[None]
    b, gh, gw, c = f.shape
    z = f.reshape(b, gh * gw, c)
    z = z - z.mean(-1, keepdims=True)
    nrm = np.linalg.norm(z, axis=-1, keepdims=True)
    if (nrm < 1e-12).any():
        raise ValueError("correlation undefined for constant feature vectors")
    z = z / nrm
    corr = np.einsum("bpc,bqc->pq", z, z) / b
    ys, xs = np.divmod(np.arange(gh * gw), gw)
    dist = np.rint(np.hypot(ys[:, None] - ys[None], xs[:, None] - xs[None])).astype(int)
    bins = np.arange(1, min(gh, gw) // 2 + 1)
    means = np.array([corr[dist == d].mean() if (dist == d).any() else np.nan for d in bins])
    keep = ~np.isnan(means)
    return bins[keep].astype(float), means[keep]


def corr_decay_slope(featmaps) -> float:
    d, m = corr_decay_curve(featmaps)
    if d.size < 2:
        raise ValueError("need at least two populated distance bins")
    slope, _ = np.polyfit(d, m, 1)
    return float(slope)


# --- reports -------------------------------------------------------------------------

def write_report(out_dir: str | Path, kind: str, payload: dict, rows: list[dict] | None = None
                 ) -> Path:
    """Write report.json (versioned) and, when rows are given, report.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": REPORT_VERSION, "kind": kind, **payload}
    (out / "report.json").write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")
    if rows:
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return out / "report.json"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o)}")


def heatmap_pixels(m: np.ndarray, upscale: int = 8) -> np.ndarray:
    """[h, w] values -> [h*u, w*u, 3] uint8 grayscale, min-max scaled."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    g = np.zeros_like(m) if hi - lo <= 0 else (m - lo) / (hi - lo)
    px = np.round(g * 255).astype(np.uint8)
    px = np.repeat(np.repeat(px, upscale, 0), upscale, 1)
    return np.repeat(px[..., None], 3, axis=2)


def rgb_pixels(img: np.ndarray, upscale: int = 8) -> np.ndarray:
    px = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return np.repeat(np.repeat(px, upscale, 0), upscale, 1)
