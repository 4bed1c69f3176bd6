"""The evaluation toolkit on known ground truth: label F1, Fréchet and
kernel distances with closed-form checks, PRDC, and the probe network
whose feature space the image metrics live in.

Run: python3 demos/06_metrics.py
"""

import numpy as np

from duplex.data import gen_corpus, train_test_split
from duplex.metrics import (ProbeConfig, alignment_score, frechet_distance,
                            kernel_distance, micro_macro_f1, prdc,
                            probe_accuracy, train_probe)

rng = np.random.default_rng(0)

# -- multi-label F1 -----------------------------------------------------------

true = [np.array([1, 0, 1, 0, 0, 0]), np.array([0, 1, 0, 0, 0, 0])]
pred = [np.array([1, 0, 0, 0, 0, 0]), np.array([0, 1, 0, 0, 1, 0])]
micro, macro = micro_macro_f1(true, pred)
print(f"micro f1 {micro:.3f}  macro f1 {macro:.3f}")

# -- Fréchet distance against the closed form ---------------------------------

d, n = 8, 20000
mean_shift = np.full(d, 0.5)
a = rng.normal(size=(n, d))
b = rng.normal(size=(n, d)) + mean_shift
fd = frechet_distance(a, b)
print(f"fd between shifted gaussians: {fd:.4f} "
      f"(closed form {float(mean_shift @ mean_shift):.4f})")

same = frechet_distance(a, a)
print(f"fd of a set against itself: {same:.2e}")

# -- kernel distance: unbiased, so the null sits at zero -----------------------

x = rng.normal(size=(4000, 16))
y = rng.normal(size=(4000, 16))
print(f"kd on two draws of the same distribution: {kernel_distance(x, y):+.2e}")
print(f"kd after shifting one set:                {kernel_distance(x, y + 1.0):+.4f}")

# -- prdc reacts to mode dropping ----------------------------------------------

full = rng.normal(size=(600, 8))
half = rng.normal(size=(600, 8)) * np.array([1.0] * 4 + [0.05] * 4)
p, r, dens, cov = prdc(full, half, k=5)
print(f"collapsed fake set: precision {p:.2f} recall {r:.2f} coverage {cov:.2f}")

# -- the probe: trained once on real pairs, then frozen -------------------------

samples = gen_corpus(600, seed=5, resolution=32)
train, test = train_test_split(samples)
images = np.stack([s.image for s in train])
labels = np.stack([s.labels for s in train])
probe = train_probe(images, labels, seed=0, steps=250,
                    cfg=ProbeConfig(d_p=16, width=16))

test_imgs = np.stack([s.image for s in test])
test_lbls = np.stack([s.labels for s in test])
acc = probe_accuracy(probe, test_imgs, test_lbls)
print(f"\nprobe accuracy on held-out scenes: {acc:.3f}")

# alignment: do images carry the findings their conditions asked for?
score = alignment_score(test_imgs, test_lbls, probe)
chance = alignment_score(test_imgs, test_lbls[rng.permutation(len(test_lbls))], probe)
print(f"alignment of real pairs {score:.3f} vs permuted pairs {chance:.3f}")
print("generated images are scored the same way, against the labels of the "
      "reports\nthey were conditioned on; probe features also feed fd/kd/prdc.")
