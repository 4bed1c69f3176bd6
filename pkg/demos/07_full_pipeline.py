"""The whole system at miniature scale: corpus, three training stages with
branch freezing, codec and probe pretraining, evaluation, and one ablation
row. Step counts are tiny so this finishes in a few minutes; the run
directory it leaves behind has the same shape as a full run.

Run: python3 demos/07_full_pipeline.py
"""

import os
import tempfile

import numpy as np

from duplex.data import gen_corpus
from duplex.metrics import evaluate
from duplex.params import GENERATION, UNDERSTANDING
from duplex.pipeline import (ABLATION_GRID, StageConfig, run_ablation,
                             run_pipeline)

run_dir = os.path.join(tempfile.mkdtemp(prefix="duplex_demo_"), "run")
print("run directory:", run_dir)

# big enough that the test split clears the Fréchet sample floor (d_p + 1)
samples = gen_corpus(800, seed=11, resolution=32)

configs = {
    1: StageConfig(stage=1, learning_rate=1e-4, warmup_steps=2, total_steps=6,
                   resolution=32, use_repa=False, repa_weight=0.0, batch_size=16,
                   freeze=(GENERATION,), mixing_ratio=(1, 0), scale=2),
    2: StageConfig(stage=2, learning_rate=2e-4, warmup_steps=2, total_steps=6,
                   resolution=32, use_repa=True, repa_weight=0.5, batch_size=16,
                   freeze=(UNDERSTANDING,), mixing_ratio=(0, 1), scale=2),
    3: StageConfig(stage=3, learning_rate=1e-4, warmup_steps=0, total_steps=4,
                   resolution=64, use_repa=False, repa_weight=0.0, batch_size=16,
                   freeze=(UNDERSTANDING,), mixing_ratio=(0, 1), scale=2),
}

bundle, codec, probe, manifests = run_pipeline(
    samples, run_dir, seed=0, configs=configs, codec_steps=30, probe_steps=30)

print("\nartifacts on disk:")
for name in sorted(os.listdir(run_dir)):
    print("  ", name)

print("\nstage-2 manifest highlights:")
m = manifests[2].entries
for key in ("config.total_steps", "config.freeze", "config.mixing_ratio",
            "n_trainable", "n_frozen", "repa_cosine_start", "repa_cosine_end",
            "final_loss", "dataset_hash"):
    print(f"  {key} = {m[key]}")

report = evaluate(bundle, codec, probe, samples, seed=0, sampler_steps=8,
                  max_text=8, max_gen=40, pathology_cap=0,
                  out_path=os.path.join(run_dir, "report.txt"))
print(f"\nevaluation: micro_f1 {report.micro_f1_neg:.3f}  fd {report.fd:.2f}  "
      f"kd {report.kd:.2f}  alignment {report.alignment:.3f}")
print("(fd/kd are large and f1 is near zero at this scale; the acceptance "
      "suite\nruns the calibrated budgets)")

rows = run_ablation(samples, run_dir, os.path.join(run_dir, "ablation.tsv"),
                    seed=0, steps=2, eval_cap=6, grid=ABLATION_GRID[:1])
print("\nablation row:", rows[0]["name"],
      f"micro_f1 {rows[0]['micro_f1']:.3f}  fd {rows[0]['fd']:.2f}")
print("full grid:", ", ".join(name for name, _, _ in ABLATION_GRID))
