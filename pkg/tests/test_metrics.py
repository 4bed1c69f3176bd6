import numpy as np
import pytest
from sklearn.metrics import f1_score

from duplex.metrics import (MetricReport, ProbeConfig, ProbeNetwork, alignment_score,
                            frechet_distance, kernel_distance, micro_macro_f1, prdc,
                            probe_accuracy, probe_hash, save_probe, load_probe,
                            train_probe)


# -- f1 -----------------------------------------------------------------------

def test_perfect_predictions_are_one_one():
    y = np.random.default_rng(0).integers(0, 2, size=(30, 6))
    assert micro_macro_f1(y, y) == (1.0, 1.0)


def test_all_zero_zero_support_convention():
    z = np.zeros((10, 6), dtype=int)
    micro, macro = micro_macro_f1(z, z)
    assert micro == 0.0 and macro == 0.0


def test_f1_matches_sklearn_on_random_cases():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        true = rng.integers(0, 2, size=(n, 6))
        pred = rng.integers(0, 2, size=(n, 6))
        micro, macro = micro_macro_f1(pred, true)
        assert micro == pytest.approx(
            f1_score(true, pred, average="micro", zero_division=0), abs=1e-12)
        assert macro == pytest.approx(
            f1_score(true, pred, average="macro", zero_division=0), abs=1e-12)


def test_f1_counting_oracle():
    rng = np.random.default_rng(2)
    true = rng.integers(0, 2, size=(50, 6))
    pred = rng.integers(0, 2, size=(50, 6))
    micro, macro = micro_macro_f1(pred, true)
    per = []
    TP = FP = FN = 0
    for k in range(6):
        tp = int(((pred[:, k] == 1) & (true[:, k] == 1)).sum())
        fp = int(((pred[:, k] == 1) & (true[:, k] == 0)).sum())
        fn = int(((pred[:, k] == 0) & (true[:, k] == 1)).sum())
        TP, FP, FN = TP + tp, FP + fp, FN + fn
        per.append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
    assert micro == pytest.approx(2 * TP / (2 * TP + FP + FN), abs=1e-15)
    assert macro == pytest.approx(np.mean(per), abs=1e-15)
    assert 0.0 <= micro <= 1.0 and 0.0 <= macro <= 1.0


def test_f1_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape mismatch"):
        micro_macro_f1(np.zeros((3, 6)), np.zeros((4, 6)))


# -- frechet -------------------------------------------------------------------

def test_fd_identical_sets_zero():
    a = np.random.default_rng(3).normal(size=(40, 8))
    assert frechet_distance(a, a) <= 1e-6


def test_fd_symmetric():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(50, 8)), rng.normal(size=(50, 8)) + 0.5
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)


def test_fd_gaussian_closed_form():
    rng = np.random.default_rng(5)
    d, n = 8, 10_000
    m = np.full(d, 0.7)
    a = rng.normal(size=(n, d))
    b = rng.normal(size=(n, d)) + m
    want = float(m @ m)
    assert frechet_distance(a, b) == pytest.approx(want, rel=0.05)


def test_fd_sample_floor():
    a = np.zeros((8, 8))
    with pytest.raises(ValueError, match="at least 9 samples"):
        frechet_distance(a, a)


def test_fd_nonnegative_on_noisy_cases():
    rng = np.random.default_rng(6)
    for _ in range(10):
        a = rng.normal(size=(12, 4))
        b = rng.normal(size=(12, 4))
        assert frechet_distance(a, b) >= 0.0


# -- kernel distance ---------------------------------------------------------------

def test_kd_null_case_small():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(4000, 32))
    b = rng.normal(size=(4000, 32))
    assert abs(kernel_distance(a, b)) < 1e-3


def test_kd_symmetric():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(30, 8)), rng.normal(size=(30, 8)) + 1.0
    assert kernel_distance(a, b) == pytest.approx(kernel_distance(b, a), abs=1e-12)


def test_kd_double_loop_oracle():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(7, 4))
    y = rng.normal(size=(5, 4))
    got = kernel_distance(x, y)

    def kern(a, b):
        return (a @ b / 4 + 1.0) ** 3

    xx = sum(kern(x[i], x[j]) for i in range(7) for j in range(7) if i != j) / (7 * 6)
    yy = sum(kern(y[i], y[j]) for i in range(5) for j in range(5) if i != j) / (5 * 4)
    xy = sum(kern(x[i], y[j]) for i in range(7) for j in range(5)) / 35
    assert got == pytest.approx(xx + yy - 2 * xy, abs=1e-12)


def test_kd_size_floor():
    with pytest.raises(ValueError, match=">= 2 samples"):
        kernel_distance(np.zeros((1, 4)), np.zeros((5, 4)))


def test_kd_separated_distributions_positive():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(100, 8))
    b = rng.normal(size=(100, 8)) + 2.0
    assert kernel_distance(a, b) > 1.0


# -- prdc --------------------------------------------------------------------------

def test_prdc_identical_sets():
    a = np.random.default_rng(11).normal(size=(30, 6))
    precision, recall, density, coverage = prdc(a, a.copy(), k=5)
    assert precision == 1.0 and recall == 1.0 and coverage == 1.0
    assert density >= 0.0


def test_prdc_distant_fakes_all_zero():
    rng = np.random.default_rng(12)
    real = rng.normal(size=(20, 4))
    fake = rng.normal(size=(20, 4)) + 1000.0
    precision, recall, density, coverage = prdc(real, fake, k=3)
    assert (precision, density, coverage) == (0.0, 0.0, 0.0)
    assert recall == 0.0


def test_prdc_brute_force_oracle():
    rng = np.random.default_rng(13)
    real = rng.normal(size=(20, 5))
    fake = rng.normal(size=(20, 5)) + 0.3
    k = 4
    got = prdc(real, fake, k=k)

    def radii(x):
        out = []
        for i in range(len(x)):
            d = sorted(np.linalg.norm(x[i] - x[j]) for j in range(len(x)) if j != i)
            out.append(d[k - 1])
        return np.array(out)

    rr, rf = radii(real), radii(fake)
    d = np.array([[np.linalg.norm(r - f) for f in fake] for r in real])
    precision = np.mean([(d[:, j] <= rr).any() for j in range(20)])
    recall = np.mean([(d[i, :] <= rf).any() for i in range(20)])
    density = np.mean([(d[:, j] <= rr).sum() for j in range(20)]) / k
    coverage = np.mean([(d[i, :] <= rr[i]).any() for i in range(20)])
    assert got == pytest.approx((precision, recall, density, coverage), abs=1e-12)


def test_prdc_sample_floor():
    with pytest.raises(ValueError, match="at least 6"):
        prdc(np.zeros((5, 3)), np.zeros((10, 3)), k=5)


# -- probe + alignment ----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_probe_setup():
    rng = np.random.default_rng(14)
    n = 240
    labels = rng.integers(0, 2, size=(n, 6))
    # each label lights up its own block of the image: easy for a conv net
    images = np.zeros((n, 16, 16, 1))
    for k in range(6):
        r, c = divmod(k, 3)
        images[:, 8 * r:8 * r + 8, 5 * c:5 * c + 5, 0] = labels[:, k, None, None] * 0.8
    images += rng.normal(size=images.shape) * 0.02
    probe = train_probe(images[:200], labels[:200], seed=0, steps=300, batch=16,
                        lr=5e-3, cfg=ProbeConfig(d_p=8, width=8))
    return probe, images, labels


def test_probe_learns_synthetic_stripes(toy_probe_setup):
    probe, images, labels = toy_probe_setup
    acc = probe_accuracy(probe, images[200:], labels[200:])
    assert acc > 0.9


def test_probe_features_shapes(toy_probe_setup):
    probe, images, _ = toy_probe_setup
    grid = probe.grid_features(images[:3])
    assert grid.shape == (3, 16, 8)
    feats = probe.features(images[:3])
    np.testing.assert_allclose(feats, grid.mean(axis=1), atol=1e-12)


def test_probe_save_load_hash(tmp_path, toy_probe_setup):
    probe, images, _ = toy_probe_setup
    save_probe(tmp_path / "p.ckpt", probe)
    back = load_probe(tmp_path / "p.ckpt", cfg=ProbeConfig(d_p=8, width=8))
    assert back.trained
    assert probe_hash(back) == probe_hash(probe)
    np.testing.assert_array_equal(back.predict(images[:4]), probe.predict(images[:4]))


def test_alignment_score_matches_probe_accuracy(toy_probe_setup):
    probe, images, labels = toy_probe_setup
    score = alignment_score(images[200:], labels[200:], probe)
    assert score == pytest.approx(probe_accuracy(probe, images[200:], labels[200:]), abs=1e-12)


def test_alignment_score_complement_symmetry(toy_probe_setup):
    probe, images, labels = toy_probe_setup
    base = alignment_score(images[200:], labels[200:], probe)
    flipped = alignment_score(images[200:], 1 - labels[200:], probe)
    assert flipped == pytest.approx(1.0 - base, abs=1e-12)


def test_alignment_requires_trained_probe():
    with pytest.raises(ValueError, match="trained probe"):
        alignment_score(np.zeros((2, 16, 16, 1)), np.zeros((2, 6)), ProbeNetwork())


def test_alignment_length_mismatch():
    probe = ProbeNetwork()
    probe.trained = True
    with pytest.raises(ValueError, match="per generated image"):
        alignment_score(np.zeros((2, 16, 16, 1)), np.zeros((3, 6)), probe)


# -- report text --------------------------------------------------------------------

def make_report():
    return MetricReport(micro_f1_neg=0.91, macro_f1_neg=0.88, micro_f1_pos=0.92,
                        macro_f1_pos=0.89, fd=12.5, kd=0.003, alignment=0.77,
                        precision=0.8, recall=0.7, density=1.2, coverage=0.9,
                        n_text=40, n_real=40, n_gen=40, probe="abc123",
                        extra={"fd_ring": 3.25})


def test_report_text_is_sorted_key_value():
    lines = make_report().to_text().strip().splitlines()
    keys = [ln.split(" = ")[0] for ln in lines]
    assert keys == sorted(keys)
    assert "fd_ring = 3.25" in lines
    assert "probe = 'abc123'" in lines


def test_report_parse_roundtrip(tmp_path):
    rep = make_report()
    rep.save(tmp_path / "r.txt")
    parsed = MetricReport.parse((tmp_path / "r.txt").read_text())
    assert parsed["micro_f1_neg"] == 0.91
    assert parsed["n_gen"] == 40 and isinstance(parsed["n_gen"], int)
    assert parsed["probe"] == "abc123"
    assert parsed["fd_ring"] == 3.25
