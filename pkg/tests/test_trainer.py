import csv
from dataclasses import replace

import pytest
import torch

from conftest import dual, tiny_cfg
from regdit.config import TrainConfig
from regdit.datakit import gen_synthetic
from regdit.trainer import (CheckpointError, create_state, decay_exempt, ema_update, fit,
                            load_checkpoint, read_checkpoint, save_checkpoint, train_step)

TC = TrainConfig(batch_size=8, steps=6, lr=1e-3, warmup=2, weight_decay=0.01, ema_decay=0.9,
                 per_class=4, log_every=1, ckpt_every=3)


def _data(cfg=None):
    cfg = cfg or tiny_cfg()
    ds = gen_synthetic(cfg.num_classes, 4, cfg.image, seed=0)
    return ds.images, ds.labels


def _params(state):
    return {k: v.detach().clone() for k, v in state.model.named_parameters()}


def test_lr_zero_leaves_params_and_ema():
    st = create_state(tiny_cfg(), replace(TC, lr=0.0))
    before, ema_before = _params(st), {k: v.clone() for k, v in st.ema.items()}
    x, y = _data()
    train_step(st, x[:8], y[:8])
    for k, v in st.model.named_parameters():
        assert torch.equal(v, before[k])
        assert torch.equal(st.ema[k], ema_before[k])
    assert st.step == 1


def test_two_runs_identical():
    x, y = _data()
    runs = []
    for _ in range(2):
        st = create_state(tiny_cfg(dual=dual("compact_dual", "mlp", "adaln")), TC)
        hist = fit(st, x, y)
        runs.append((hist, _params(st), st.ema))
    assert [h["loss"] for h in runs[0][0]] == [h["loss"] for h in runs[1][0]]
    for k in runs[0][1]:
        assert torch.equal(runs[0][1][k], runs[1][1][k])
        assert torch.equal(runs[0][2][k], runs[1][2][k])


def test_ema_update():
    p = {"a": torch.randn(3, 4), "b": torch.randn(5)}
    e = {k: torch.randn_like(v) for k, v in p.items()}
    assert all(torch.equal(v, p[k]) for k, v in ema_update({k: v.clone() for k, v in e.items()}, p, 0.0).items())
    same = {k: v.clone() for k, v in p.items()}
    assert all(torch.equal(v, p[k]) for k, v in ema_update(same, p, 0.37).items())
    ref = {k: v.clone() for k, v in e.items()}
    out = ema_update(e, p, 0.9)
    for k in p:
        flat_e, flat_p = ref[k].reshape(-1).tolist(), p[k].reshape(-1).tolist()
        loop = [0.9 * a + 0.1 * b for a, b in zip(flat_e, flat_p)]
        assert max(abs(u - v) for u, v in zip(out[k].reshape(-1).tolist(), loop)) < 1e-7
    with pytest.raises(ValueError):
        ema_update({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        ema_update(e, p, 1.0)


def test_decay_groups():
    st = create_state(tiny_cfg(dual=dual("compact_dual", "rmsnorm", "adaln")), TC)
    flags = st.decay_flags
    assert flags["registers"] is False
    assert flags["blocks.0.adaln.proj.bias"] is False
    assert flags["blocks.1.norm1.weight"] is False
    assert flags["blocks.1.norm1_reg_weight"] is False
    assert flags["blocks.0.adaln.proj.weight"] is True
    assert flags["blocks.0.attn.qkv.weight"] is True
    groups = st.optimizer.param_groups
    assert groups[1]["weight_decay"] == 0.0 and groups[0]["weight_decay"] == TC.weight_decay
    ids = {id(p) for p in groups[1]["params"]}
    assert id(st.model.registers) in ids
    assert decay_exempt("in_context.weight", torch.zeros(4, 4))


def test_weight_decay_never_touches_registers():
    st = create_state(tiny_cfg(), replace(TC, weight_decay=0.5, lr=1e-2))
    x, y = _data()
    # with zero gradient a decayed tensor would still shrink; registers must not
    st.model.registers.requires_grad_(False)
    reg = st.model.registers.detach().clone()
    fit(st, x, y, steps=2)
    assert torch.equal(st.model.registers, reg)


def test_non_finite_aborts():
    st = create_state(tiny_cfg(), TC)
    x, y = _data()
    with pytest.raises((FloatingPointError, ValueError)):
        bad = x[:8].clone()
        bad[0, 0, 0, 0] = float("nan")
        train_step(st, bad, y[:8])
    with pytest.raises(ValueError):
        train_step(st, x[:0], y[:0])


def test_metrics_csv_and_checkpoints(tmp_path):
    st = create_state(tiny_cfg(), TC)
    x, y = _data()
    fit(st, x, y, out_dir=tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert list(rows[0]) == ["step", "loss", "grad_norm", "lr", "wall_ms"]
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert sorted(p.name for p in tmp_path.glob("*.rdit")) == ["ckpt_0000003.rdit", "ckpt_0000006.rdit"]


def test_checkpoint_round_trip_bytes(tmp_path):
    st = create_state(tiny_cfg(dual=dual("compact_dual", "adaln", "mlp", "attention", "rmsnorm")), TC)
    x, y = _data()
    fit(st, x, y, steps=2)
    save_checkpoint(st, tmp_path / "a.rdit")
    back = load_checkpoint(tmp_path / "a.rdit")
    save_checkpoint(back, tmp_path / "b.rdit")
    assert (tmp_path / "a.rdit").read_bytes() == (tmp_path / "b.rdit").read_bytes()
    for k, v in st.model.named_parameters():
        assert torch.equal(v, dict(back.model.named_parameters())[k])
    assert back.step == 2 and back.model_cfg == st.model_cfg
    header, tensors = read_checkpoint(tmp_path / "a.rdit")
    assert header["format"] == "RDIT"
    assert all(r["offset"] % 64 == 0 for r in header["tensors"])


def test_checkpoint_errors(tmp_path):
    st = create_state(tiny_cfg(), TC)
    p = tmp_path / "c.rdit"
    save_checkpoint(st, p)
    data = p.read_bytes()
    (tmp_path / "magic.rdit").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.rdit")
    (tmp_path / "ver.rdit").write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.rdit")
    (tmp_path / "trunc.rdit").write_bytes(data[: len(data) - 100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.rdit")
    with pytest.raises(CheckpointError, match=r"tensor param\.\S+: checkpoint shape"):
        load_checkpoint(p, replace(tiny_cfg(), width=32, heads=2))


def test_resume_equals_uninterrupted(tmp_path):
    x, y = _data()
    full = create_state(tiny_cfg(), TC)
    hist_full = fit(full, x, y)
    part = create_state(tiny_cfg(), TC)
    hist_a = fit(part, x, y, steps=3)
    save_checkpoint(part, tmp_path / "mid.rdit")
    resumed = load_checkpoint(tmp_path / "mid.rdit")
    hist_b = fit(resumed, x, y)
    assert [h["loss"] for h in hist_a + hist_b] == [h["loss"] for h in hist_full]
    for k, v in full.model.named_parameters():
        assert torch.equal(v, dict(resumed.model.named_parameters())[k])
        assert torch.equal(full.ema[k], resumed.ema[k])


def test_ema_model_uses_shadow_weights():
    st = create_state(tiny_cfg(), TC)
    x, y = _data()
    fit(st, x, y, steps=2)
    em = st.ema_model()
    for k, v in em.named_parameters():
        assert torch.equal(v, st.ema[k])
