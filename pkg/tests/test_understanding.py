import numpy as np
import pytest

from duplex import tensor as T
from duplex.blocks import BlockConfig
from duplex.params import Initializer, ParamTree
from duplex.tensor import Tensor, grad_check
from duplex.understanding import (BOS, EOS, PAD, REP, SEG_INSTR, SEG_OUTPUT, SEG_VISUAL,
                                  MultimodalSequence, UnderstandingConfig,
                                  UnderstandingModel, Vocabulary)


def tiny_model(vocab_size=8, seed=0, normalize_loss=True):
    cfg = UnderstandingConfig(
        vocab_size=vocab_size,
        backbone=BlockConfig(d=32, num_heads=2, mlp_hidden=64, num_layers=1),
        d_vis=16, vis_layers=1, vis_heads=2, vis_mlp=32, patch=8,
        normalize_loss=normalize_loss)
    tree = ParamTree()
    model = UnderstandingModel(tree, cfg, Initializer(np.random.default_rng(seed)))
    return model, tree


def rand_image(seed=0, size=32):
    return Tensor(np.random.default_rng(seed).random((size, size, 1)))


# -- vocabulary --------------------------------------------------------------

def test_vocab_specials_at_fixed_low_ids():
    v = Vocabulary(["ring", "bar"])
    assert v.words[:4] == ("<pad>", "<bos>", "<eos>", "<rep>")
    assert (PAD, BOS, EOS, REP) == (0, 1, 2, 3)
    assert len(v) == 6


def test_vocab_roundtrip_and_oov():
    v = Vocabulary(["ring", "bar", "mild"])
    ids = v.encode("mild ring")
    assert v.decode(ids) == "mild ring"
    with pytest.raises(KeyError, match="not in vocabulary"):
        v.encode("zebra")


# -- visual encoder ------------------------------------------------------------

def test_patch_count_32x32_patch8():
    model, _ = tiny_model()
    out = model.encode_image(rand_image())
    assert out.data.shape == (16, 16)  # P = 16 patches, d_vis = 16


def test_constant_image_identical_patch_rows():
    model, tree = tiny_model()
    img = Tensor(np.full((1, 32, 32, 1), 0.37))
    x = model.patchify(img) @ tree["und.vis.patch.w"] + tree["und.vis.patch.b"]
    rows = x.data[0]
    assert np.abs(rows - rows[0]).max() == 0.0


def test_indivisible_image_raises():
    model, _ = tiny_model()
    with pytest.raises(ValueError, match="not divisible"):
        model.encode_image(Tensor(np.zeros((1, 30, 30, 1))))


def test_single_image_promotion_matches_batch():
    model, _ = tiny_model()
    img = rand_image(3)
    single = model.encode_image(img)
    batched = model.encode_image(img.reshape(1, 32, 32, 1))
    np.testing.assert_array_equal(single.data, batched.data[0])


def test_patchify_row_major_patch_order():
    model, _ = tiny_model()
    img = np.zeros((1, 16, 16, 1))
    img[0, 0:8, 8:16, 0] = 1.0  # second patch in row-major order
    patches = model.patchify(Tensor(img)).data[0]
    assert patches.shape == (4, 64)
    assert patches[1].sum() == 64.0 and patches[[0, 2, 3]].sum() == 0.0


def test_encoder_grad_check():
    model, _ = tiny_model()
    probe = np.random.default_rng(1).normal(size=(16, 16))

    def f(x):
        return (model.encode_image(x) * Tensor(probe)).sum()

    x = Tensor(np.random.default_rng(2).random((32, 32, 1)), requires_grad=True)
    assert grad_check(f, x, sample=60, rng=np.random.default_rng(3)) < 1e-4


# -- connector ---------------------------------------------------------------------

def test_connector_zero_weights_zero_output():
    model, tree = tiny_model()
    for name in ("und.connector.w1", "und.connector.b1", "und.connector.w2", "und.connector.b2"):
        tree[name].data[...] = 0.0
    out = model.connect(Tensor(np.random.default_rng(0).normal(size=(16, 16))))
    assert out.data.shape == (16, 32)
    assert np.all(out.data == 0.0)


# -- sequence assembly ------------------------------------------------------------

def test_sequence_layout_and_span():
    model, _ = tiny_model()
    seq = model.build_sequence(rand_image(), [BOS], [REP, 5, 6, EOS])
    assert seq.m == 17 and seq.n == 20
    assert (seq.segments[:16] == SEG_VISUAL).all()
    assert seq.segments[16] == SEG_INSTR
    assert (seq.segments[17:] == SEG_OUTPUT).all()
    assert (seq.token_ids[:16] == -1).all()
    assert seq.token_ids[16:].tolist() == [BOS, REP, 5, 6, EOS]


def test_empty_output_raises():
    model, _ = tiny_model()
    with pytest.raises(ValueError, match="output span is empty"):
        model.build_sequence(rand_image(), [BOS], [])


def test_bad_span_bounds_raise():
    rows = Tensor(np.zeros((4, 8)))
    ids = np.zeros(4, dtype=np.int64)
    segs = np.zeros(4, dtype=np.int64)
    with pytest.raises(ValueError, match="bad loss span"):
        MultimodalSequence(rows=rows, token_ids=ids, segments=segs, m=2, n=4)


# -- ar loss ----------------------------------------------------------------------

def test_uniform_logits_single_target_ln8():
    model, tree = tiny_model(vocab_size=8)
    tree["und.lm_head.w"].data[...] = 0.0
    tree["und.lm_head.b"].data[...] = 0.0
    seq = model.build_sequence(rand_image(), [BOS], [REP, EOS])
    loss = model.ar_loss(seq)
    assert abs(loss.data - np.log(8.0)) < 1e-12


def test_three_token_loss_matches_per_position_sum():
    model, _ = tiny_model(normalize_loss=False)
    seq = model.build_sequence(rand_image(), [BOS], [REP, 4, 5, 6])
    loss = model.ar_loss(seq).data
    logits = model.logits(seq.rows).data
    manual = 0.0
    for pos in range(seq.m, seq.n):
        z = logits[pos]
        z = z - z.max()
        manual -= (z - np.log(np.exp(z).sum()))[seq.token_ids[pos + 1]]
    assert abs(loss - manual) < 1e-10


def test_normalized_loss_is_sum_over_span_length():
    m_norm, _ = tiny_model(normalize_loss=True)
    m_sum, _ = tiny_model(normalize_loss=False)
    seq_n = m_norm.build_sequence(rand_image(), [BOS], [REP, 4, 5, 6])
    seq_s = m_sum.build_sequence(rand_image(), [BOS], [REP, 4, 5, 6])
    assert abs(m_sum.ar_loss(seq_s).data - 3.0 * m_norm.ar_loss(seq_n).data) < 1e-12


def test_instruction_target_id_perturbation_ignored():
    model, _ = tiny_model()
    seq = model.build_sequence(rand_image(), [BOS], [REP, 4, EOS])
    base = model.ar_loss(seq).data
    seq.token_ids[16] = 7  # instruction id changes, embedding row does not
    assert model.ar_loss(seq).data == base


def test_pad_rows_beyond_n_do_not_affect_loss():
    model, _ = tiny_model()
    seq = model.build_sequence(rand_image(), [BOS], [REP, 4, EOS])
    base = model.ar_loss(seq).data
    garbage = Tensor(np.random.default_rng(9).normal(size=(3, 32)) * 100.0)
    rows = T.concat([seq.rows, garbage], axis=0)
    ids = np.concatenate([seq.token_ids, [PAD, PAD, PAD]])
    segs = np.concatenate([seq.segments, [SEG_OUTPUT] * 3])
    padded = MultimodalSequence(rows=rows, token_ids=ids, segments=segs, m=seq.m, n=seq.n)
    assert model.ar_loss(padded).data == base


def test_batch_loss_equals_mean_of_singles():
    model, _ = tiny_model()
    imgs = Tensor(np.random.default_rng(5).random((3, 32, 32, 1)))
    outs = [[REP, 4, EOS], [REP, 5, 6, 7, EOS], [REP, 6, EOS]]
    seqs = model.build_sequences(imgs, [[BOS]] * 3, outs)
    batch = model.ar_loss_batch(seqs).data
    singles = [model.ar_loss(model.build_sequence(imgs[i], [BOS], outs[i])).data
               for i in range(3)]
    assert abs(batch - np.mean(singles)) < 1e-12


def test_batch_rejects_empty_span():
    model, _ = tiny_model()
    v = model.visual_rows(rand_image().reshape(1, 32, 32, 1))[0]
    seq = model._assemble(v, [BOS], [REP, EOS])
    seq_empty = MultimodalSequence(rows=seq.rows, token_ids=seq.token_ids,
                                   segments=seq.segments, m=seq.m, n=seq.m)
    with pytest.raises(ValueError, match="output span is empty"):
        model.ar_loss_batch([seq, seq_empty])


def test_loss_gradient_reaches_visual_path():
    model, tree = tiny_model()
    seq = model.build_sequence(rand_image(), [BOS], [REP, 4, EOS])
    loss = model.ar_loss(seq)
    T.backward(loss)
    assert tree["und.vis.patch.w"].grad is not None
    assert np.abs(tree["und.vis.patch.w"].grad).max() > 0.0


# -- decoding ----------------------------------------------------------------------

def test_greedy_is_pure_and_deterministic():
    model, _ = tiny_model()
    img = rand_image(7)
    a = model.generate(img, [BOS], max_len=10)
    b = model.generate(img, [BOS], max_len=10)
    assert a == b
    assert len(a) <= 10
    assert EOS not in a


def test_eos_first_model_gives_empty_report():
    model, tree = tiny_model()
    tree["und.lm_head.w"].data[...] = 0.0
    tree["und.lm_head.b"].data[...] = 0.0
    tree["und.lm_head.b"].data[EOS] = 50.0
    assert model.generate(rand_image(), [BOS]) == []


def test_greedy_tie_breaks_to_lowest_id():
    model, tree = tiny_model()
    tree["und.lm_head.w"].data[...] = 0.0
    tree["und.lm_head.b"].data[...] = 0.0  # all logits tie
    out = model.generate(rand_image(), [BOS], max_len=3)
    assert out == [PAD, PAD, PAD]  # id 0 wins every tie, never EOS


def test_sample_mode_needs_rng_and_is_seeded():
    model, _ = tiny_model()
    img = rand_image(1)
    with pytest.raises(ValueError, match="needs an rng"):
        model.generate(img, [BOS], mode="sample")
    a = model.generate(img, [BOS], max_len=8, mode="sample",
                       rng=np.random.default_rng(11))
    b = model.generate(img, [BOS], max_len=8, mode="sample",
                       rng=np.random.default_rng(11))
    assert a == b
    with pytest.raises(ValueError, match="unknown decode mode"):
        model.generate(img, [BOS], mode="beam")


# -- condition encoding ----------------------------------------------------------

def test_condition_padding_leaves_content_rows_unchanged():
    model, _ = tiny_model()
    ids = [4, 5, 6]
    plain = model.encode_condition(ids)
    padded = model.encode_condition(ids, pad_to=12)
    assert padded.data.shape == (12, 32)
    np.testing.assert_allclose(padded.data[:5], plain.data, atol=1e-12)


def test_condition_pad_too_small_raises():
    model, _ = tiny_model()
    with pytest.raises(ValueError, match="pad_to"):
        model.encode_condition([4, 5, 6], pad_to=4)


def test_condition_batch_matches_singles():
    model, _ = tiny_model()
    reports = [[4, 5], [6], [4, 5, 6, 7]]
    batch = model.encode_condition_batch(reports, pad_to=8)
    assert batch.data.shape == (3, 8, 32)
    for i, r in enumerate(reports):
        single = model.encode_condition(r, pad_to=8)
        np.testing.assert_allclose(batch.data[i], single.data, atol=1e-12)
