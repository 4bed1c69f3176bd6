"""The paired image/report corpus: procedural scenes, templated reports,
a noise injector that fakes transcription artifacts, and the cleaner that
undoes them. Every label is recoverable from the text, which is what makes
end-to-end evaluation exact.

Run: python3 demos/02_synthetic_corpus.py
"""

import numpy as np

from duplex.data import (FINDINGS, clean_report, extract_labels, gen_corpus,
                         render)

samples = gen_corpus(400, seed=7, resolution=32)
print(f"{len(samples)} paired samples")

# find a sample with at least two findings so the report has some meat
rich = next(s for s in samples if s.labels.sum() >= 2)

print("\nraw report (what a transcription pipeline would hand you):")
print(" ", rich.raw_report)
print("\nclean report (the training target):")
print(" ", rich.report)
assert clean_report(rich.raw_report) == rich.report

labels = extract_labels(rich.report)
print("\nlabels recovered from text:",
      {FINDINGS[k]: int(v) for k, v in enumerate(labels)})
assert (labels == rich.labels).all()

# hedged mentions ("possible X") count as absent by default and as present
# under the uncertain-positive convention
hedged = next(s for s in samples if "possible" in s.report)
print("\na hedged report:", hedged.report)
print("  strict labels:   ", extract_labels(hedged.report))
print("  hedge-as-positive:", extract_labels(hedged.report, uncertain_positive=True))

# the same scene renders at any resolution; the noise field lives on a
# fixed lattice so coarse pixels are a subsample, not a rescale
lo = render(rich.spec, 32)
hi = render(rich.spec, 64)
print(f"\nrender shapes: {lo.shape} and {hi.shape}, "
      f"range [{hi.min():.3f}, {hi.max():.3f}]")

# crude look at the image itself
chars = " .:-=+*#%@"
img = lo[:, :, 0]
stride = 32 // 32
print("\n32x32 scene, one character per pixel:")
for row in img[::stride]:
    q = np.clip((row * (len(chars) - 1)).astype(int), 0, len(chars) - 1)
    print("".join(chars[v] for v in q[::stride]))

counts = np.stack([s.labels for s in samples]).mean(axis=0)
print("\nper-finding frequency (target 0.30):",
      {FINDINGS[k]: round(float(v), 3) for k, v in enumerate(counts)})
