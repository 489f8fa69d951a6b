import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import dual, tiny_cfg
from regdit.backbone import (ActivationTrace, Block, DiT, TokenBatch, block_forward, count_params,
                             estimate_flops, insert_aux_tokens, model_forward, patchify,
                             remove_aux_tokens, sinusoidal_features, timestep_embedding,
                             unpatchify)
from regdit.config import ModelConfig, preset
from regdit.flow import xpred_loss
from regdit.numerics import rmsnorm


def test_patchify_counts():
    assert patchify(torch.zeros(1, 3, 256, 256), 16).shape == (1, 256, 768)
    img = torch.randn(2, 3, 32, 32)
    one = patchify(img, 32)
    assert one.shape == (2, 1, 3072)
    assert torch.equal(one[:, 0], img.permute(0, 2, 3, 1).reshape(2, -1))


@given(st.sampled_from([1, 2, 4]), st.integers(1, 4), st.integers(1, 3))
def test_patchify_round_trip(p, g, c):
    img = torch.randn(2, c, p * g, p * g)
    assert torch.equal(unpatchify(patchify(img, p), p, c), img)


def test_patchify_row_major():
    img = torch.arange(16.0).reshape(1, 1, 4, 4)
    tok = patchify(img, 2)
    assert tok[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]  # top-right patch second
    with pytest.raises(ValueError):
        patchify(torch.zeros(1, 1, 5, 5), 2)


def test_timestep_features():
    f = timestep_embedding(torch.zeros(1), 8)
    assert torch.equal(f[0, :4], torch.ones(4)) and torch.equal(f[0, 4:], torch.zeros(4))
    t = torch.tensor([0.3], dtype=torch.float64)
    f = sinusoidal_features(t * 1000, 8)
    for i in range(4):
        freq = math.exp(-math.log(10000.0) * i / 4)
        assert abs(float(f[0, i]) - math.cos(300 * freq)) < 1e-6
        assert abs(float(f[0, 4 + i]) - math.sin(300 * freq)) < 1e-6
    assert torch.equal(timestep_embedding(t, 8), timestep_embedding(t.clone(), 8))
    with pytest.raises(ValueError):
        timestep_embedding(t, 7)


def _schedule(n_reg, start, end, depth=12):
    cfg = replace(preset("B/16"), cond_mode="registers", n_reg=n_reg, reg_start=start, reg_end=end,
                  depth=depth)
    return cfg


def test_block_lengths_window():
    cfg = _schedule(32, 4, 11)
    assert [cfg.tokens_in_block(l) for l in range(12)] == [256] * 4 + [288] * 8
    cfg = _schedule(32, 4, 9)
    assert cfg.tokens_in_block(10) == 256


def test_traced_token_counts_and_head():
    cfg = tiny_cfg(depth=5, reg_start=1, reg_end=3, n_reg=3)
    m = DiT(cfg)
    out, tr = m(torch.randn(2, 3, 8, 8), torch.rand(2), torch.tensor([0, 1]), capture=True)
    assert [b.n_tokens for b in tr.blocks] == [4, 7, 7, 7, 4]
    assert tr.splits() == [0, 3, 3, 3, 0]
    assert out.shape == (2, 3, 8, 8)


def test_insert_remove():
    cfg = tiny_cfg(cond_mode="registers", n_reg=2, reg_start=1, reg_end=1)
    seq = TokenBatch(torch.randn(2, 4, 16), 0)
    aux = torch.randn(2, 2, 16)
    ins = insert_aux_tokens(seq, 1, cfg, aux)
    assert ins.split == 2 and torch.equal(ins.aux, aux)
    back = remove_aux_tokens(ins, 2, cfg)
    assert torch.equal(back.data, seq.data) and back.split == 0
    with pytest.raises(ValueError):
        insert_aux_tokens(seq, 0, cfg, aux)
    with pytest.raises(ValueError):
        remove_aux_tokens(seq, 2, cfg)
    with pytest.raises(ValueError):
        insert_aux_tokens(seq, 1, replace(cfg, cond_mode="none", n_reg=0), aux)
    none = replace(cfg, n_reg=0)
    assert insert_aux_tokens(seq, 1, none, aux[:, :0]) is seq


def test_in_context_rows_equal_class_embedding():
    cfg = tiny_cfg(cond_mode="in_context", n_reg=4, reg_start=0, reg_end=2)
    m = DiT(cfg)
    lab = torch.tensor([2, 0])
    aux = m.aux_tokens(lab, 2)
    for b in range(2):
        for i in range(4):
            assert torch.equal(aux[b, i], m.in_context.weight[lab[b]])


def test_block_identity_at_init_and_shape():
    cfg = tiny_cfg()
    blk = Block(cfg)
    blk.reset_special()
    seq = TokenBatch(torch.randn(2, 6, 16), 2)
    out, _ = block_forward(blk, seq, torch.randn(2, 16))
    assert torch.equal(out.data, seq.data) and out.split == 2


def test_block_scalar_reference_width8():
    cfg = ModelConfig(width=8, heads=1, mlp_hidden=5)
    blk = Block(cfg).double()
    with torch.no_grad():
        for p in blk.parameters():
            p.normal_(0, 0.3)
    x = torch.randn(1, 3, 8, dtype=torch.float64)
    c = torch.randn(1, 8, dtype=torch.float64)
    out, _ = blk(TokenBatch(x, 0), c)

    def lin(layer, v):
        W, b = layer.weight.detach().numpy(), layer.bias.detach().numpy()
        return [sum(W[o, i] * v[i] for i in range(len(v))) + b[o] for o in range(W.shape[0])]

    def norm(v, w):
        r = math.sqrt(sum(a * a for a in v) / len(v) + cfg.norm_eps)
        return [a / r * wi for a, wi in zip(v, w.detach().numpy())]

    sc = c[0].numpy()
    m = lin(blk.adaln.proj, [a / (1 + math.exp(-a)) for a in sc])
    sh1, s1, g1, sh2, s2, g2 = (m[i * 8:(i + 1) * 8] for i in range(6))
    xs = x[0].numpy().tolist()
    h = [[a * (1 + s) + b for a, s, b in zip(norm(row, blk.norm1.weight), s1, sh1)] for row in xs]
    qkv = [lin(blk.attn.qkv, row) for row in h]
    att = []
    for i in range(3):
        sc_ = [sum(qkv[i][d] * qkv[j][8 + d] for d in range(8)) / math.sqrt(8) for j in range(3)]
        e = [math.exp(s - max(sc_)) for s in sc_]
        p = [z / sum(e) for z in e]
        att.append([sum(p[j] * qkv[j][16 + d] for j in range(3)) for d in range(8)])
    xs = [[a + g * o for a, g, o in zip(xs[i], g1, lin(blk.attn.proj, att[i]))] for i in range(3)]
    ref = []
    for row in xs:
        h2 = [a * (1 + s) + b for a, s, b in zip(norm(row, blk.norm2.weight), s2, sh2)]
        u = lin(blk.mlp.fc1, h2)
        hid = [u[i] / (1 + math.exp(-u[i])) * u[5 + i] for i in range(5)]
        ref.append([a + g * o for a, g, o in zip(row, g2, lin(blk.mlp.fc2, hid))])
    np.testing.assert_allclose(out.data[0].detach().numpy(), np.array(ref), atol=1e-5)


def test_block_non_finite_raises():
    cfg = tiny_cfg()
    blk = Block(cfg)
    with pytest.raises(FloatingPointError):
        block_forward(blk, TokenBatch(torch.full((1, 4, 16), float("nan")), 0), torch.zeros(1, 16))


def test_model_identity_blocks_at_init():
    cfg = tiny_cfg(depth=4, reg_start=1, reg_end=2)
    m = DiT(cfg)
    x = torch.randn(2, 3, 8, 8)
    out, tr = m(x, torch.rand(2), torch.tensor([0, 1]), capture=True)
    assert torch.equal(tr.blocks[0].data, tr.embed.data)
    assert torch.equal(tr.blocks[1].patches, tr.embed.data)
    assert torch.equal(tr.blocks[1].aux, m.registers[None].expand(2, -1, -1))
    assert torch.equal(out, torch.zeros_like(out))  # zero-initialized head


@pytest.mark.parametrize("name", ["toy", "B/16"])
def test_output_shape(name):
    cfg = preset(name)
    if name != "toy":
        cfg = replace(cfg, depth=1, reg_start=0, reg_end=0)
    m = DiT(cfg)
    x = torch.randn(1, cfg.channels, cfg.image, cfg.image)
    assert model_forward(m, x, 0.5, 0).shape == x.shape


def test_forward_bit_reproducible():
    cfg = replace(preset("toy"), cond_mode="registers", n_reg=4, reg_start=2, reg_end=5)
    x = torch.randn(2, 3, 32, 32)
    t, y = torch.rand(2), torch.tensor([1, 2])
    outs = []
    for _ in range(2):
        m = DiT(cfg, seed=3)
        with torch.no_grad():  # leave the head non-zero so outputs carry signal
            m.head.weight.normal_(generator=torch.Generator().manual_seed(1))
        outs.append(m(x, t, y))
    assert outs[0].abs().sum() > 0
    assert torch.equal(outs[0], outs[1])
    assert not torch.equal(DiT(cfg, seed=4).registers, DiT(cfg, seed=3).registers)


def _perturbed(cfg, seed=0):
    m = DiT(cfg, seed=seed).double()
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 11)
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
    return m


def test_aux_gradients_only_through_interactions():
    cfg = tiny_cfg()
    m = _perturbed(cfg)
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    loss = xpred_loss(m(x, torch.rand(2, dtype=torch.float64), torch.tensor([0, 1])), x)
    loss.backward()
    assert m.registers.grad.abs().sum() > 0
    # blocking attention into the patch stream cuts the only path to the loss
    m.zero_grad()
    for blk in m.blocks:
        with torch.no_grad():
            blk.adaln.proj.weight[2 * 16:3 * 16].zero_()
            blk.adaln.proj.bias[2 * 16:3 * 16].zero_()
    loss = xpred_loss(m(x, torch.rand(2, dtype=torch.float64), torch.tensor([0, 1])), x)
    loss.backward()
    assert m.registers.grad.abs().max() == 0


def test_loss_independent_of_aux_values_after_removal():
    cfg = tiny_cfg(depth=3, reg_start=1, reg_end=1)
    m = _perturbed(cfg)
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    t = torch.rand(2, dtype=torch.float64)
    y = torch.tensor([0, 2])
    ref = m(x, t, y)

    def clobber(_mod, _inp, out):
        seq, w = out
        data = seq.data.clone()
        data[:, : seq.split] = 1e3
        return TokenBatch(data, seq.split), w

    h = m.blocks[1].register_forward_hook(clobber)
    changed = m(x, t, y)
    h.remove()
    # the last aux-bearing block's aux outputs never reach the head
    assert torch.equal(ref, changed)


def test_count_params_matches_live_model():
    for cfg in (tiny_cfg(), tiny_cfg(dual=dual("compact_dual", "adaln", "mlp", "attention", "rmsnorm")),
                tiny_cfg(dual=dual("full_dual", "adaln", "mlp", "attention", "rmsnorm")),
                tiny_cfg(cond_mode="in_context", n_reg=2), preset("toy")):
        live = sum(p.numel() for p in DiT(cfg).parameters())
        assert count_params(cfg)["total"] == live, cfg


@pytest.mark.parametrize("components", [(), ("mlp",), ("rmsnorm", "adaln"), ("attention", "mlp")])
def test_single_equals_dual_minus_extras(components):
    base = preset("B/16")
    single = count_params(base)
    for mode in ("compact_dual", "full_dual"):
        cfg = replace(base, dual=dual(mode, *components) if components else dual("single"))
        cp = count_params(cfg)
        assert single["total"] == cp["total"] - cp["dual_extras"]
        if not components:
            assert cp["dual_extras"] == 0


def test_compact_closed_form_deltas():
    base = preset("B/16")
    w, h, r = base.width, base.mlp_hidden, base.lora_rank
    n_aux = sum(base.aux_in_block(l) for l in range(base.depth))
    single = count_params(base)["total"]

    def delta(*c):
        return count_params(replace(base, dual=dual("compact_dual", *c)))["total"] - single

    assert delta("mlp") == n_aux * (h * w + w)
    assert delta("rmsnorm") == n_aux * 2 * w
    assert delta("adaln") == n_aux * (w * r + r * 6 * w)
    assert delta("attention") == n_aux * (w * r + r * 3 * w)


def test_flops_linear_in_depth():
    a = estimate_flops(preset("toy"))["gflops"]
    b = estimate_flops(replace(preset("toy"), depth=16))["gflops"]
    assert b / a == pytest.approx(2.0, rel=0.01)


def test_trace_save_load(tmp_path):
    cfg = tiny_cfg()
    m = DiT(cfg)
    _, tr = m(torch.randn(1, 3, 8, 8), torch.rand(1), torch.tensor([0]), capture=True)
    tr.save(tmp_path / "t.npz")
    back = ActivationTrace.load(tmp_path / "t.npz")
    assert back.splits() == tr.splits() and back.grid == tr.grid
    for a, b in zip(back.blocks, tr.blocks):
        assert torch.equal(a.data, b.data)
