"""Training loop, EMA, and the RDIT checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"RDIT" | u32 version | u64 header_len | header (UTF-8 JSON) | pad to 64
    payload: one record per tensor, each starting on a 64-byte boundary

The header holds the flat config, the step counter and a tensor table of
(name, shape, dtype, offset, nbytes); offsets are relative to the payload start.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .backbone import DiT
from .config import ConfigError, ModelConfig, TrainConfig, from_flat, to_flat
from .flow import forward_process, sample_time, xpred_loss

log = logging.getLogger(__name__)

MAGIC = b"RDIT"
VERSION = 1
ALIGN = 64
BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.uint8: "|u1", torch.int64: "<i8"}


class CheckpointError(RuntimeError):
    pass


def decay_exempt(name: str, p: Tensor) -> bool:
    """Register tokens, in-context tokens, norm weights and all biases skip decay."""
    return p.ndim < 2 or name in ("registers", "in_context.weight")


@dataclass
class TrainState:
    model: DiT
    train_cfg: TrainConfig
    optimizer: torch.optim.Optimizer
    ema: dict[str, Tensor]
    generator: torch.Generator
    step: int = 0
    decay_flags: dict[str, bool] = field(default_factory=dict)

    @property
    def model_cfg(self) -> ModelConfig:
        return self.model.cfg

    def ema_model(self) -> DiT:
        m = DiT(self.model_cfg)
        m.load_state_dict(self.ema)
        return m.eval()


def _make_optimizer(model: DiT, tcfg: TrainConfig):
    decay, no_decay, flags = [], [], {}
    for name, p in model.named_parameters():
        exempt = decay_exempt(name, p)
        flags[name] = not exempt
        (no_decay if exempt else decay).append(p)
    groups = [{"params": decay, "weight_decay": tcfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    opt = torch.optim.AdamW(groups, lr=tcfg.lr, betas=BETAS, eps=ADAM_EPS, foreach=False)
    return opt, flags


def create_state(model_cfg: ModelConfig, tcfg: TrainConfig) -> TrainState:
    model = DiT(model_cfg, seed=tcfg.seed)
    opt, flags = _make_optimizer(model, tcfg)
    ema = {k: v.detach().clone() for k, v in model.named_parameters()}
    gen = torch.Generator().manual_seed(tcfg.seed + 1)
    return TrainState(model, tcfg, opt, ema, gen, 0, flags)


def lr_at(step: int, tcfg: TrainConfig) -> float:
    if tcfg.warmup <= 0:
        return tcfg.lr
    return tcfg.lr * min(1.0, (step + 1) / tcfg.warmup)


@torch.no_grad()
def ema_update(ema: dict[str, Tensor], params: dict[str, Tensor], decay: float) -> dict[str, Tensor]:
    """ema <- decay * ema + (1 - decay) * params, in place (returned for chaining)."""
    if not 0 <= decay < 1:
        raise ValueError("EMA decay must lie in [0, 1)")
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.shape:
            raise ValueError(f"EMA tensor {name} has shape {tuple(e.shape)}, param {tuple(p.shape)}")
        e.lerp_(p.detach(), 1.0 - decay)
    return ema


def train_step(state: TrainState, images: Tensor, labels: Tensor) -> dict[str, float]:
    """One optimizer step on a batch; updates ``state`` in place."""
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    tcfg = state.train_cfg
    model = state.model
    cfg = model.cfg
    g = state.generator
    b = images.shape[0]

    t = sample_time(b, tcfg.time_dist, g, tcfg.time_mu, tcfg.time_sigma).to(images.dtype)
    eps = torch.randn(images.shape, generator=g, dtype=images.dtype)
    drop = torch.rand(b, generator=g) < tcfg.label_dropout
    labels = torch.where(drop, torch.full_like(labels, cfg.num_classes), labels)

    model.train()
    pred = model(forward_process(images, eps, t), t, labels)
    loss = xpred_loss(pred, images)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    grad_norm = math.sqrt(sum(float(gr.double().pow(2).sum()) for gr in grads))
    if not math.isfinite(grad_norm):
        bad = [n for n, p in model.named_parameters()
               if p.grad is not None and not torch.isfinite(p.grad).all()]
        raise FloatingPointError(f"non-finite gradient at step {state.step} in {bad[:5]}")

    lr = lr_at(state.step, tcfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    ema_update(state.ema, dict(model.named_parameters()), tcfg.ema_decay)
    state.step += 1
    return {"loss": loss.item(), "grad_norm": grad_norm, "lr": lr}


def batch_indices(n: int, batch: int, seed: int, step: int) -> Tensor:
    """Batch composition depends only on (seed, step), so resuming replays it."""
    gen = torch.Generator().manual_seed(seed * 1_000_003 + step)
    return torch.randint(n, (batch,), generator=gen)


def fit(state: TrainState, images: Tensor, labels: Tensor, steps: int | None = None,
        out_dir: str | Path | None = None, callback=None) -> list[dict]:
    """Run ``steps`` training steps (default: until ``train_cfg.steps``)."""
    tcfg = state.train_cfg
    end = tcfg.steps if steps is None else state.step + steps
    history = []
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "metrics.csv"
        fresh = not path.exists() or state.step == 0
        fh = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss", "grad_norm", "lr", "wall_ms"])
    try:
        while state.step < end:
            t0 = time.perf_counter()
            idx = batch_indices(images.shape[0], tcfg.batch_size, tcfg.seed, state.step)
            metrics = train_step(state, images[idx], labels[idx])
            metrics["step"] = state.step
            metrics["wall_ms"] = (time.perf_counter() - t0) * 1e3
            history.append(metrics)
            if callback is not None:
                callback(metrics)
            if state.step % tcfg.log_every == 0 or state.step == end:
                log.info("step %d loss %.5f grad_norm %.4f", state.step, metrics["loss"],
                         metrics["grad_norm"])
                if writer is not None:
                    writer.writerow([state.step, f"{metrics['loss']:.8g}",
                                     f"{metrics['grad_norm']:.8g}", f"{metrics['lr']:.8g}",
                                     f"{metrics['wall_ms']:.3f}"])
            if out is not None and (state.step % tcfg.ckpt_every == 0 or state.step == end):
                save_checkpoint(state, out / f"ckpt_{state.step:07d}.rdit")
    finally:
        if writer is not None:
            fh.close()
    return history


# --- checkpoints ---------------------------------------------------------------------

def _state_tensors(state: TrainState) -> dict[str, Tensor]:
    tensors = {}
    params = dict(state.model.named_parameters())
    for name, p in params.items():
        tensors[f"param.{name}"] = p.detach()
    for name, e in state.ema.items():
        tensors[f"ema.{name}"] = e
    for name, p in params.items():
        st = state.optimizer.state.get(p)
        if st:
            tensors[f"adam_step.{name}"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
            tensors[f"adam_m.{name}"] = st["exp_avg"]
            tensors[f"adam_v.{name}"] = st["exp_avg_sq"]
    tensors["rng"] = state.generator.get_state()
    return tensors


def _pad(n: int) -> int:
    return (-n) % ALIGN


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors = _state_tensors(state)
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {t.dtype}")
        arr = t.detach().cpu().contiguous().numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    header = json.dumps({
        "format": "RDIT", "version": VERSION, "step": state.step,
        "config": to_flat(state.model.cfg, state.train_cfg), "tensors": table,
    }, indent=1).encode()
    pre = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    pre += b"\0" * _pad(len(pre))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(pre)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, Tensor]]:
    """Return (header, tensors) after validating magic, version and sizes."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an RDIT checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[16 : 16 + hlen].decode())
    start = 16 + hlen
    start += _pad(start)
    tensors = {}
    for rec in header["tensors"]:
        lo = start + rec["offset"]
        hi = lo + rec["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated payload in tensor {rec['name']}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        tensors[rec["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path: str | Path, model_cfg: ModelConfig | None = None,
                    train_cfg: TrainConfig | None = None) -> TrainState:
    header, tensors = read_checkpoint(path)
    try:
        saved_model, saved_train, _ = from_flat(header["config"])
    except ConfigError as e:
        raise CheckpointError(f"{path}: embedded config invalid: {e}") from None
    model_cfg = model_cfg or saved_model
    train_cfg = train_cfg or saved_train
    state = create_state(model_cfg, train_cfg)
    params = dict(state.model.named_parameters())

    def fetch(key: str, like: Tensor) -> Tensor:
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key}")
        t = tensors[key]
        if tuple(t.shape) != tuple(like.shape):
            raise CheckpointError(f"tensor {key}: checkpoint shape {tuple(t.shape)} "
                                  f"does not match model shape {tuple(like.shape)}")
        return t.to(like.dtype)

    extra = {k.split(".", 1)[1] for k in tensors if k.startswith("param.")} - set(params)
    if extra:
        raise CheckpointError(f"{path}: checkpoint has tensors unknown to the model: {sorted(extra)[:3]}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(fetch(f"param.{name}", p))
            state.ema[name] = fetch(f"ema.{name}", p).clone()
            if f"adam_m.{name}" in tensors:
                state.optimizer.state[p] = {
                    "step": tensors[f"adam_step.{name}"].clone(),
                    "exp_avg": fetch(f"adam_m.{name}", p).clone(),
                    "exp_avg_sq": fetch(f"adam_v.{name}", p).clone(),
                }
    state.generator.set_state(tensors["rng"].clone())
    state.step = int(header["step"])
    return state
