"""Evaluation suite: F1 over extracted labels, feature-space distances
(Fréchet, kernel MMD, PRDC), alignment score, and the frozen probe
network whose feature space all image metrics live in.

The probe is a small conv net trained once per run on the synthetic
corpus with a multi-label objective, then frozen and hash-pinned; it is
both the metric embedder and the alignment-regularizer target.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np
from scipy.linalg import eigh, eigvalsh
from scipy.spatial.distance import cdist

from . import checkpoint as ckpt_io
from . import tensor as T
from .conv import conv3, down2
from .data import FINDINGS, NUM_FINDINGS, extract_labels, train_test_split
from .generation import euler_sample
from .optim import OptimizerState, adamw_step
from .params import Initializer, ParamTree
from .tensor import Tensor
from .understanding import BOS

# -- probe network -------------------------------------------------------------


@dataclasses.dataclass
class ProbeConfig:
    d_p: int = 32
    width: int = 32


class ProbeNetwork:
    """Conv feature extractor + multi-label head over the findings."""

    def __init__(self, cfg: ProbeConfig | None = None, seed: int = 0):
        self.cfg = cfg or ProbeConfig()
        self.tree = ParamTree()
        self.trained = False
        init = Initializer(np.random.default_rng(seed))
        w, dp = self.cfg.width, self.cfg.d_p
        tr = self.tree
        init.normal(tr, "probe.c1.w", (3, 3, 1, w))
        init.zeros(tr, "probe.c1.b", (w,))
        init.normal(tr, "probe.d1.w", (4 * w, 2 * w))
        init.zeros(tr, "probe.d1.b", (2 * w,))
        init.normal(tr, "probe.d2.w", (8 * w, 2 * w))
        init.zeros(tr, "probe.d2.b", (2 * w,))
        init.normal(tr, "probe.c2.w", (3, 3, 2 * w, dp))
        init.zeros(tr, "probe.c2.b", (dp,))
        # head reads mean and (soft) max pools: presence of a localized
        # finding shows up in the max long before it moves the mean
        init.normal(tr, "probe.head.w", (2 * dp, NUM_FINDINGS))
        init.zeros(tr, "probe.head.b", (NUM_FINDINGS,))

    def _grid(self, images: Tensor) -> Tensor:
        tr = self.tree
        h = conv3(images, tr["probe.c1.w"], tr["probe.c1.b"]).gelu()
        h = down2(h, tr["probe.d1.w"], tr["probe.d1.b"]).gelu()
        h = down2(h, tr["probe.d2.w"], tr["probe.d2.b"]).gelu()
        return conv3(h, tr["probe.c2.w"], tr["probe.c2.b"])

    def logits(self, images: Tensor) -> Tensor:
        g = self._grid(images)
        mean_pool = g.mean(axis=(1, 2))
        # smooth max via shifted log-mean-exp; the shift is a constant so the
        # gradient is the exact softmax weighting
        shift = g.data.max(axis=(1, 2), keepdims=True)
        sharp = 8.0
        soft = ((g - shift) * sharp).exp().mean(axis=(1, 2)).log() * (1.0 / sharp)
        max_pool = soft + shift[:, 0, 0, :]
        pooled = T.concat([mean_pool, max_pool], axis=-1)
        return pooled @ self.tree["probe.head.w"] + self.tree["probe.head.b"]

    # numpy-facing inference helpers (frozen probe)

    def grid_features(self, images: np.ndarray) -> np.ndarray:
        """[B, H, W, 1] -> [B, (H/4)*(W/4), d_p] spatial features."""
        with T.no_grad():
            g = self._grid(Tensor(images)).data
        b, h, w, c = g.shape
        return g.reshape(b, h * w, c)

    def features(self, images: np.ndarray) -> np.ndarray:
        """Pooled [B, d_p] features; the metric embedding."""
        return self.grid_features(images).mean(axis=1)

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            z = self.logits(Tensor(images)).data
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return (self.predict_proba(images) > 0.5).astype(np.int64)


def train_probe(images: np.ndarray, labels: np.ndarray, seed: int = 0,
                steps: int = 600, batch: int = 32, lr: float = 5e-3,
                cfg: ProbeConfig | None = None) -> ProbeNetwork:
    """Fit the probe with per-finding binary cross-entropy."""
    probe = ProbeNetwork(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = OptimizerState.for_params(probe.tree, probe.tree.names())
    y_all = np.asarray(labels, dtype=np.float64)
    for step in range(steps):
        idx = rng.integers(0, images.shape[0], size=batch)
        z = probe.logits(Tensor(images[idx]))
        y = Tensor(y_all[idx])
        loss = (z.softplus() - z * y).mean()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"probe training diverged at step {step}")
        probe.tree.clear_grads()
        T.backward(loss)
        adamw_step(probe.tree, opt, lr)
    probe.trained = True
    return probe


def probe_hash(probe: ProbeNetwork) -> str:
    return hashlib.sha256(ckpt_io.serialize(probe.tree)).hexdigest()


def probe_accuracy(probe: ProbeNetwork, images: np.ndarray, labels: np.ndarray) -> float:
    pred = probe.predict(images)
    return float((pred == np.asarray(labels)).mean())


def save_probe(path, probe: ProbeNetwork) -> None:
    ckpt_io.save(path, probe.tree)


def load_probe(path, cfg: ProbeConfig | None = None) -> ProbeNetwork:
    ckpt = ckpt_io.load(path)
    if cfg is None:
        # recover the architecture from the stored shapes
        cfg = ProbeConfig(d_p=ckpt.params["probe.head.w"].shape[0] // 2,
                          width=ckpt.params["probe.c1.b"].shape[0])
    probe = ProbeNetwork(cfg)
    probe.tree.load_values(ckpt.params)
    probe.trained = True
    return probe


# -- label metrics ---------------------------------------------------------------


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0  # 0/0 -> 0 by convention


def micro_macro_f1(pred_labels, true_labels) -> tuple:
    """(micro, macro) F1 over K findings.

    micro pools TP/FP/FN across findings; macro averages per-finding F1,
    counting zero-support findings (no true or predicted positives) as 0.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"label shape mismatch: {pred.shape} vs {true.shape}")
    tp = ((pred == 1) & (true == 1)).sum(axis=0)
    fp = ((pred == 1) & (true == 0)).sum(axis=0)
    fn = ((pred == 0) & (true == 1)).sum(axis=0)
    micro = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    macro = float(np.mean([_f1(int(tp[k]), int(fp[k]), int(fn[k])) for k in range(pred.shape[1])]))
    return micro, macro


# -- feature-space metrics ---------------------------------------------------------


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = eigh(c)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Squared Fréchet distance between Gaussian fits of two feature sets.

    The covariance-product square root uses the eigendecomposition of the
    symmetrized product sqrt(Ca) Cb sqrt(Ca); eigenvalues below -1e-8 are
    an error, small negatives are clipped to zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature shapes incompatible: {a.shape} vs {b.shape}")
    need = a.shape[1] + 1
    if a.shape[0] < need or b.shape[0] < need:
        raise ValueError(f"need at least {need} samples per side for a "
                         f"{a.shape[1]}-dim Fréchet distance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False)
    cb = np.cov(b, rowvar=False)
    s = _psd_sqrt(ca)
    m = s @ cb @ s
    m = (m + m.T) / 2.0
    w = eigvalsh(m)
    if w.min() < -1e-8:
        raise ValueError(f"covariance product not PSD (min eigenvalue {w.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def kernel_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Unbiased squared MMD with the polynomial kernel (x.y/d + 1)^3."""
    x = np.asarray(feats_a, dtype=np.float64)
    y = np.asarray(feats_b, dtype=np.float64)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError(f"kernel distance needs >= 2 samples per side, got {m}, {n}")
    d = x.shape[1]
    kxx = (x @ x.T / d + 1.0) ** 3
    kyy = (y @ y.T / d + 1.0) ** 3
    kxy = (x @ y.T / d + 1.0) ** 3
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def prdc(real_feats: np.ndarray, fake_feats: np.ndarray, k: int = 5) -> tuple:
    """Precision, recall, density, coverage with k-NN radii (k excludes self)."""
    real = np.asarray(real_feats, dtype=np.float64)
    fake = np.asarray(fake_feats, dtype=np.float64)
    if real.shape[0] < k + 1 or fake.shape[0] < k + 1:
        raise ValueError(f"prdc with k={k} needs at least {k + 1} samples per side")

    def knn_radii(feats: np.ndarray) -> np.ndarray:
        d = cdist(feats, feats)
        np.fill_diagonal(d, np.inf)
        return np.partition(d, k - 1, axis=1)[:, k - 1]

    r_real = knn_radii(real)
    r_fake = knn_radii(fake)
    d_rf = cdist(real, fake)  # [n_real, n_fake]

    covered = d_rf <= r_real[:, None]          # real ball i covers fake j
    precision = float(covered.any(axis=0).mean())
    recall = float((d_rf <= r_fake[None, :]).any(axis=1).mean())
    density = float(covered.sum(axis=0).mean() / k)
    coverage = float((d_rf.min(axis=1) <= r_real).mean())
    return precision, recall, density, coverage


def alignment_score(generated_images: np.ndarray, condition_labels: np.ndarray,
                    probe: ProbeNetwork) -> float:
    """Mean per-finding agreement between probe predictions (threshold 0.5)
    on the generated images and the labels they were conditioned on."""
    if not probe.trained:
        raise ValueError("alignment_score needs a trained probe")
    labels = np.asarray(condition_labels, dtype=np.int64)
    if len(generated_images) != len(labels):
        raise ValueError("one label vector per generated image required")
    pred = probe.predict(generated_images)
    return float((pred == labels).mean())


# -- report + orchestration ----------------------------------------------------------


@dataclasses.dataclass
class MetricReport:
    micro_f1_neg: float
    macro_f1_neg: float
    micro_f1_pos: float
    macro_f1_pos: float
    fd: float
    kd: float
    alignment: float
    precision: float
    recall: float
    density: float
    coverage: float
    n_text: int
    n_real: int
    n_gen: int
    probe: str
    extra: dict = dataclasses.field(default_factory=dict)

    def to_text(self) -> str:
        pairs = {}
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            pairs[f.name] = getattr(self, f.name)
        pairs.update(self.extra)
        return "\n".join(f"{k} = {pairs[k]!r}" if isinstance(pairs[k], str)
                         else f"{k} = {pairs[k]}" for k in sorted(pairs)) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @staticmethod
    def parse(text: str) -> dict:
        out = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, val = line.split(" = ", 1)
            try:
                out[key] = int(val) if val.lstrip("-").isdigit() else float(val)
            except ValueError:
                out[key] = val.strip("'")
        return out


def _chunked(fn, arr: np.ndarray, size: int = 64) -> np.ndarray:
    return np.concatenate([fn(arr[i:i + size]) for i in range(0, len(arr), size)], axis=0)


def generate_for_conditions(bundle, codec, reports, resolution: int,
                            steps: int, rng: np.random.Generator,
                            batch: int = 32) -> np.ndarray:
    """Sample one image per report string. Returns [N, res, res, 1]."""
    grid = resolution // codec.cfg.factor
    shape = (grid, grid, codec.cfg.latent_channels)
    pad_to = max(bundle.cfg.gen.cond_len,
                 max(len(bundle.vocab.encode(r)) for r in reports) + 2)
    images = []
    with T.no_grad():
        for i in range(0, len(reports), batch):
            ids = [bundle.vocab.encode(r) for r in reports[i:i + batch]]
            cond = bundle.und.encode_condition_batch(ids, pad_to=pad_to)
            z = euler_sample(bundle.gen, cond, shape, steps, rng)
            images.append(codec.decode_denorm(z))
    return np.concatenate(images, axis=0)


def evaluate(bundle, codec, probe: ProbeNetwork, samples, *, seed: int = 0,
             sampler_steps: int = 25, resolution: int = 32,
             max_text: int | None = None, max_gen: int | None = None,
             pathology_cap: int = 64, out_path=None) -> MetricReport:
    """Score a model on the corpus's test split.

    Text block: greedy report decoding on test images, labels extracted
    under both uncertainty conventions, against labels extracted from the
    reference reports under the same convention. Image block: conditional
    samples for the test reports scored against the real test images in
    probe feature space. The per-pathology Fréchet table draws positives
    from the whole corpus so each row clears the sample floor.
    """
    _, test = train_test_split(samples)
    if not test:
        raise ValueError("corpus has no test split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))

    # -- understanding: generated reports vs reference reports
    text_samples = test if max_text is None else test[:max_text]
    pred_texts = []
    for s in text_samples:
        img = Tensor(_rendered(s, resolution))
        ids = bundle.und.generate(img, [BOS])
        pred_texts.append(bundle.vocab.decode(ids))
    f1 = {}
    for mode, pos in (("neg", False), ("pos", True)):
        pred = [extract_labels(t, uncertain_positive=pos) for t in pred_texts]
        true = [extract_labels(s.report, uncertain_positive=pos) for s in text_samples]
        f1[mode] = micro_macro_f1(pred, true)

    # -- generation: conditional samples vs real test images
    gen_samples = test if max_gen is None else test[:max_gen]
    real_images = np.stack([_rendered(s, resolution) for s in gen_samples])
    gen_images = generate_for_conditions(
        bundle, codec, [s.report for s in gen_samples], resolution, sampler_steps, rng)
    real_feats = _chunked(probe.features, real_images)
    gen_feats = _chunked(probe.features, gen_images)
    fd = frechet_distance(real_feats, gen_feats)
    kd = kernel_distance(real_feats, gen_feats)
    p, r, dens, cov = prdc(real_feats, gen_feats, k=5)
    labels = np.stack([s.labels for s in gen_samples])
    align = alignment_score(gen_images, labels, probe)

    extra = {"sampler_steps": sampler_steps, "seed": seed, "resolution": resolution}
    for k, name in enumerate(FINDINGS):
        positives = [s for s in samples if s.labels[k] == 1][:pathology_cap]
        need = probe.cfg.d_p + 1
        extra[f"per_pathology.{name}.n"] = len(positives)
        if len(positives) < need:
            extra[f"per_pathology.{name}.fd"] = "insufficient"
            continue
        real_k = np.stack([_rendered(s, resolution) for s in positives])
        gen_k = generate_for_conditions(
            bundle, codec, [s.report for s in positives], resolution, sampler_steps, rng)
        extra[f"per_pathology.{name}.fd"] = frechet_distance(
            _chunked(probe.features, real_k), _chunked(probe.features, gen_k))

    report = MetricReport(
        micro_f1_neg=f1["neg"][0], macro_f1_neg=f1["neg"][1],
        micro_f1_pos=f1["pos"][0], macro_f1_pos=f1["pos"][1],
        fd=fd, kd=kd, alignment=align,
        precision=p, recall=r, density=dens, coverage=cov,
        n_text=len(text_samples), n_real=len(gen_samples), n_gen=len(gen_images),
        probe=probe_hash(probe), extra=extra,
    )
    if out_path is not None:
        report.save(out_path)
    return report


def _rendered(sample, resolution: int) -> np.ndarray:
    from .data import render
    if sample.image.shape[0] == resolution:
        return sample.image
    return render(sample.spec, resolution)
