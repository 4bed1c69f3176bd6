"""The understanding branch end to end: images become patch rows, text
becomes token rows, one causal transformer predicts the report span, and
greedy decoding reads the answer back out.

A scaled-down model trains here for ~200 steps so the mechanics are
visible in under a minute; the pipeline demo runs the full schedule.

Run: python3 demos/03_report_decoding.py
"""

import numpy as np

from duplex import tensor as T
from duplex.blocks import BlockConfig
from duplex.data import extract_labels, gen_corpus, report_vocabulary, train_test_split
from duplex.optim import OptimizerState, adamw_step
from duplex.params import Initializer, ParamTree
from duplex.tensor import Tensor
from duplex.understanding import (BOS, EOS, REP, UnderstandingConfig,
                                  UnderstandingModel, Vocabulary)

rng = np.random.default_rng(0)

vocab = Vocabulary(report_vocabulary())
print(f"vocabulary: {len(vocab)} entries, specials at the front:",
      vocab.words[:4])

tree = ParamTree()
cfg = UnderstandingConfig(
    vocab_size=len(vocab),
    backbone=BlockConfig(d=64, num_heads=2, mlp_hidden=256, num_layers=2),
    d_vis=32, vis_layers=1, vis_mlp=128)
model = UnderstandingModel(tree, cfg, Initializer(np.random.default_rng(1)))
print(f"parameters: {sum(tree[n].data.size for n in tree.names()):,}")

samples = gen_corpus(300, seed=3, resolution=32)
train, test = train_test_split(samples)

# -- anatomy of one training sequence --------------------------------------

s = train[0]
seq = model.build_sequence(Tensor(s.image), [BOS], [REP] + vocab.encode(s.report) + [EOS])
P = (32 // cfg.patch) ** 2
print(f"\nsequence: {P} visual rows + instruction + output, length {seq.rows.shape[0]}")
print(f"loss span rows m={seq.m} .. n-1={seq.n - 1} predict targets m+1 .. n={seq.n}")
print("first loss target (should open the report):",
      vocab.words[int(seq.token_ids[seq.m + 1])])

# -- short training run -----------------------------------------------------

images = np.stack([x.image for x in train])
token_ids = [vocab.encode(x.report) for x in train]
opt = OptimizerState.for_params(tree, tree.names())

def batch_loss(idx):
    seqs = model.build_sequences(
        Tensor(images[idx]),
        [[BOS]] * len(idx),
        [[REP] + token_ids[i] + [EOS] for i in idx])
    return model.ar_loss_batch(seqs)

for step in range(600):
    idx = rng.integers(0, len(train), size=16)
    loss = batch_loss(idx)
    tree.clear_grads()
    T.backward(loss)
    adamw_step(tree, opt, 3e-4)
    if step % 150 == 0 or step == 599:
        print(f"step {step:3d}  ar loss {float(loss.data):.4f}")

# -- decode a held-out image -------------------------------------------------

hits = 0
shown = 0
for s in test[:20]:
    ids = model.generate(Tensor(s.image), [BOS])
    decoded = vocab.decode(ids)
    ok = (extract_labels(decoded) == s.labels).all()
    hits += int(ok)
    if shown < 3:
        print(f"\ntruth:   {s.report}\ndecoded: {decoded}   "
              f"[labels {'match' if ok else 'differ'}]")
        shown += 1

print(f"\nexact label match on {hits}/20 held-out scenes after 600 small steps")
print("(the three-stage pipeline trains this branch to >0.9 micro-F1)")
