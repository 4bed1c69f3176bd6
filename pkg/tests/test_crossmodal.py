import numpy as np
import pytest

from duplex.blocks import BlockConfig, TransformerBlock, attention, build_full_mask
from duplex.crossmodal import (DualBlock, DualProjection, UnifiedSequence, dual_qkv,
                               joint_attention, modality_select)
from duplex.params import Initializer, ParamTree
from duplex.tensor import Tensor

D, HEADS = 16, 2
CFG = BlockConfig(d=D, num_heads=HEADS, mlp_hidden=32, num_layers=1)


def make_proj(seed=0, tie=False):
    rng = np.random.default_rng(seed)

    def side():
        return {n: Tensor(rng.normal(size=(D, D)) * 0.2) for n in ("wq", "wk", "wv")} | \
               {n: Tensor(rng.normal(size=(D,)) * 0.2) for n in ("bq", "bk", "bv")}

    u = side()
    g = {k: Tensor(v.data.copy()) for k, v in u.items()} if tie else side()
    return DualProjection(u=u, g=g)


def make_seq(L=6, b=3, seed=1):
    rows = Tensor(np.random.default_rng(seed).normal(size=(L, D)))
    return UnifiedSequence(rows, b)


# -- selectors ------------------------------------------------------------------

def test_selector_values():
    assert modality_select(0, 3) == (1, 0)
    assert modality_select(3, 3) == (0, 1)  # boundary row is generation
    for i in range(8):
        du, dg = modality_select(i, 3, length=8)
        assert du + dg == 1


def test_selector_range_check():
    with pytest.raises(IndexError, match="out of range"):
        modality_select(-1, 3)
    with pytest.raises(IndexError, match="out of range"):
        modality_select(8, 3, length=8)


def test_boundary_validation():
    rows = Tensor(np.zeros((4, D)))
    UnifiedSequence(rows, 0)
    UnifiedSequence(rows, 4)
    with pytest.raises(ValueError, match="boundary"):
        UnifiedSequence(rows, 5)


# -- dual projection routing -------------------------------------------------------

def test_all_text_equals_u_projection():
    seq = make_seq(L=5, b=5)
    proj = make_proj()
    q, k, v = dual_qkv(seq, proj)
    qu, ku, vu = proj.project(seq.rows, "u")
    np.testing.assert_array_equal(q.data, qu.data)
    np.testing.assert_array_equal(k.data, ku.data)
    np.testing.assert_array_equal(v.data, vu.data)


def test_all_noise_equals_g_projection():
    seq = make_seq(L=5, b=0)
    proj = make_proj()
    q, _, _ = dual_qkv(seq, proj)
    qg, _, _ = proj.project(seq.rows, "g")
    np.testing.assert_array_equal(q.data, qg.data)


def test_mixed_sequence_matches_row_loop_oracle():
    seq = make_seq(L=7, b=3)
    proj = make_proj()
    q, k, v = dual_qkv(seq, proj)
    for i in range(7):
        du, dg = modality_select(i, 3)
        row = seq.rows.data[i]
        for got, wname, bname in ((q, "wq", "bq"), (k, "wk", "bk"), (v, "wv", "bv")):
            want = du * (row @ proj.u[wname].data + proj.u[bname].data) \
                 + dg * (row @ proj.g[wname].data + proj.g[bname].data)
            np.testing.assert_allclose(got.data[i], want, atol=1e-12)


def test_routing_preserved_under_batch_dim():
    rows = Tensor(np.random.default_rng(2).normal(size=(2, 6, D)))
    proj = make_proj()
    qb, _, _ = dual_qkv(UnifiedSequence(rows, 2), proj)
    for bi in range(2):
        qs, _, _ = dual_qkv(UnifiedSequence(Tensor(rows.data[bi]), 2), proj)
        np.testing.assert_array_equal(qb.data[bi], qs.data)


# -- joint attention ---------------------------------------------------------------

def test_tied_weights_collapse_bitwise_to_vanilla():
    seq = make_seq(L=6, b=3)
    proj = make_proj(tie=True)
    out_w = Tensor(np.random.default_rng(4).normal(size=(D, D)) * 0.2)
    mask = build_full_mask(6)
    joint = joint_attention(seq, proj, mask, HEADS, out_w=out_w)
    q, k, v = proj.project(seq.rows, "u")
    vanilla = attention(q, k, v, mask, HEADS, out_w=out_w)
    assert np.array_equal(joint.data, vanilla.data)  # bitwise, not approx


def test_cross_modal_flow_text_to_noise():
    # zeroing the text rows' values must change noise-row outputs
    seq = make_seq(L=6, b=3, seed=5)
    proj = make_proj(seed=6)
    out_w = Tensor(np.eye(D))
    mask = build_full_mask(6)
    base = joint_attention(seq, proj, mask, HEADS, out_w=out_w).data
    proj.u["wv"] = Tensor(np.zeros((D, D)))
    proj.u["bv"] = Tensor(np.zeros(D))
    cut = joint_attention(seq, proj, mask, HEADS, out_w=out_w).data
    assert np.abs(base[3:] - cut[3:]).max() > 1e-6


def test_cross_modal_flow_noise_to_text():
    # perturbing a noise row must change text-row outputs (feedback path)
    proj = make_proj(seed=7)
    out_w = Tensor(np.eye(D))
    mask = build_full_mask(6)
    rows = np.random.default_rng(8).normal(size=(6, D))
    base = joint_attention(UnifiedSequence(Tensor(rows), 3), proj, mask, HEADS,
                           out_w=out_w).data
    bumped = rows.copy()
    bumped[5] += 1.0
    out = joint_attention(UnifiedSequence(Tensor(bumped), 3), proj, mask, HEADS,
                          out_w=out_w).data
    assert np.abs(out[:3] - base[:3]).max() > 1e-6


# -- dual block -------------------------------------------------------------------

def make_block(seed=0):
    tree = ParamTree()
    block = DualBlock(tree, "gen.layer0", CFG, Initializer(np.random.default_rng(seed)))
    return block, tree


def test_dual_block_param_layout():
    _, tree = make_block()
    names = set(tree.names())
    for side in ("u", "g"):
        for n in ("wq", "wk", "wv", "bq", "bk", "bv"):
            assert f"gen.layer0.attn.{side}.{n}" in names
    for shared in ("attn.wo", "attn.bo", "attn.q_norm", "attn.k_norm",
                   "norm1.w", "norm2.w", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"):
        assert f"gen.layer0.{shared}" in names


def test_dual_block_collapse_matches_plain_block():
    block, tree = make_block(seed=3)
    # tie g to u so routing is invisible
    for n in ("wq", "wk", "wv", "bq", "bk", "bv"):
        tree[f"gen.layer0.attn.g.{n}"].data[...] = tree[f"gen.layer0.attn.u.{n}"].data

    plain_tree = ParamTree()
    plain = TransformerBlock(plain_tree, "gen.ref", CFG, Initializer(np.random.default_rng(9)))
    mapping = {"attn.wq": "attn.u.wq", "attn.wk": "attn.u.wk", "attn.wv": "attn.u.wv",
               "attn.bq": "attn.u.bq", "attn.bk": "attn.u.bk", "attn.bv": "attn.u.bv"}
    for pname in plain_tree.names():
        tail = pname.removeprefix("gen.ref.")
        plain_tree[pname].data[...] = tree[f"gen.layer0.{mapping.get(tail, tail)}"].data

    x = Tensor(np.random.default_rng(10).normal(size=(5, D)))
    mask = build_full_mask(5)
    got = block.forward(x, boundary=2, mask=mask, base_len=8).data
    from duplex.blocks import block_forward
    want = block_forward(x, mask, plain, base_len=8).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_dual_block_boundary_changes_output():
    block, _ = make_block(seed=4)
    x = Tensor(np.random.default_rng(11).normal(size=(5, D)))
    mask = build_full_mask(5)
    a = block.forward(x, boundary=2, mask=mask, base_len=8).data
    b = block.forward(x, boundary=3, mask=mask, base_len=8).data
    assert np.abs(a - b).max() > 1e-8  # row 2 switched parameter sets
