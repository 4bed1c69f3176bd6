"""Autoregressive understanding branch.

A small visual encoder embeds image patches, a two-layer connector maps
them into the language model width, and a causal transformer predicts
report tokens. The sequence layout is [visual rows, instruction tokens,
output tokens]; loss is taken only over the output span.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, TransformerStack, build_causal_mask, build_full_mask
from .params import Initializer, ParamTree
from .tensor import Tensor

PAD, BOS, EOS, REP = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<bos>", "<eos>", "<rep>")

SEG_VISUAL, SEG_INSTR, SEG_OUTPUT = 0, 1, 2


class Vocabulary:
    """Whitespace tokenizer over a closed word list plus four specials."""

    def __init__(self, words):
        self.words = _SPECIALS + tuple(sorted(set(words)))
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list:
        ids = []
        for w in text.split():
            if w not in self._ids:
                raise KeyError(f"word not in vocabulary: {w!r}")
            ids.append(self._ids[w])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


@dataclasses.dataclass
class UnderstandingConfig:
    vocab_size: int
    backbone: BlockConfig = dataclasses.field(default_factory=BlockConfig)
    d_vis: int = 64
    vis_layers: int = 2
    vis_heads: int = 2
    vis_mlp: int = 256
    patch: int = 8
    base_len: int = 128   # positions past this are interpolated
    normalize_loss: bool = True


@dataclasses.dataclass
class MultimodalSequence:
    """Embedded rows plus the bookkeeping needed for the output-span loss.

    token_ids is -1 at visual rows. m is the index of the last input row
    (the output delimiter); n is the index of the final output token. Loss
    covers predictions at rows m..n-1, i.e. targets m+1..n.
    """

    rows: Tensor
    token_ids: np.ndarray
    segments: np.ndarray
    m: int
    n: int

    def __post_init__(self):
        L = self.rows.data.shape[0]
        if not (0 <= self.m <= self.n < L):
            raise ValueError(f"bad loss span m={self.m} n={self.n} for length {L}")


class UnderstandingModel:
    def __init__(self, tree: ParamTree, cfg: UnderstandingConfig, init: Initializer):
        self.cfg = cfg
        self.tree = tree
        p = cfg.patch
        vis_cfg = BlockConfig(d=cfg.d_vis, num_heads=cfg.vis_heads,
                              mlp_hidden=cfg.vis_mlp, num_layers=cfg.vis_layers)
        d = cfg.backbone.d
        init.normal(tree, "und.vis.patch.w", (p * p, cfg.d_vis))
        init.zeros(tree, "und.vis.patch.b", (cfg.d_vis,))
        self.vis_stack = TransformerStack(tree, "und.vis", vis_cfg, init)
        init.normal(tree, "und.connector.w1", (cfg.d_vis, d))
        init.zeros(tree, "und.connector.b1", (d,))
        init.normal(tree, "und.connector.w2", (d, d))
        init.zeros(tree, "und.connector.b2", (d,))
        init.normal(tree, "und.embed.w", (cfg.vocab_size, d))
        self.backbone = TransformerStack(tree, "und.backbone", cfg.backbone, init)
        init.normal(tree, "und.lm_head.w", (d, cfg.vocab_size))
        init.zeros(tree, "und.lm_head.b", (cfg.vocab_size,))

    # -- encoders ---------------------------------------------------------

    def patchify(self, images: Tensor) -> Tensor:
        """[B, H, W, 1] -> [B, P, patch*patch] in row-major patch order."""
        p = self.cfg.patch
        b, h, w, c = images.data.shape
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch {p}")
        x = images.reshape(b, h // p, p, w // p, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def encode_image(self, images: Tensor) -> Tensor:
        """[B, H, W, 1] -> [B, P, d_vis] bidirectional patch features.

        A single [H, W, 1] image is accepted too and returns [P, d_vis].
        """
        if images.data.ndim == 3:
            return self.encode_image(images.reshape(1, *images.data.shape))[0]
        tr = self.tree
        x = self.patchify(images) @ tr["und.vis.patch.w"] + tr["und.vis.patch.b"]
        num_patches = x.data.shape[1]
        mask = build_full_mask(num_patches)
        return self.vis_stack.forward(x, mask, base_len=num_patches)

    def connect(self, v: Tensor) -> Tensor:
        tr = self.tree
        h = (v @ tr["und.connector.w1"] + tr["und.connector.b1"]).gelu()
        return h @ tr["und.connector.w2"] + tr["und.connector.b2"]

    def embed(self, ids) -> Tensor:
        return self.tree["und.embed.w"].take_rows(np.asarray(ids, dtype=np.int64))

    def visual_rows(self, images: Tensor) -> Tensor:
        return self.connect(self.encode_image(images))

    # -- sequence assembly --------------------------------------------------

    def _assemble(self, v: Tensor, instr_ids: list, output_ids: list) -> MultimodalSequence:
        if not output_ids:
            raise ValueError("output span is empty: nothing to predict")
        num_patches = v.data.shape[0]
        rows = T.concat([v, self.embed(instr_ids + output_ids)], axis=0)
        ids = np.concatenate([
            np.full(num_patches, -1, dtype=np.int64),
            np.asarray(instr_ids + output_ids, dtype=np.int64),
        ])
        segs = np.concatenate([
            np.full(num_patches, SEG_VISUAL, dtype=np.int64),
            np.full(len(instr_ids), SEG_INSTR, dtype=np.int64),
            np.full(len(output_ids), SEG_OUTPUT, dtype=np.int64),
        ])
        m = num_patches + len(instr_ids)
        n = m + len(output_ids) - 1
        return MultimodalSequence(rows=rows, token_ids=ids, segments=segs, m=m, n=n)

    def build_sequence(self, image: Tensor, instr_ids, output_ids) -> MultimodalSequence:
        """Assemble [visual | instruction | output] for one sample.

        output_ids must start with the delimiter that separates input from
        output (<rep>) and normally ends with <eos>; predictions are scored
        from the delimiter up to (not including) the final row.
        """
        v = self.visual_rows(image.reshape(1, *image.data.shape))[0]
        return self._assemble(v, list(instr_ids), list(output_ids))

    def build_sequences(self, images: Tensor, instr_lists, output_lists) -> list:
        """Batched variant: one visual forward for [B, H, W, 1] images."""
        v = self.visual_rows(images)
        return [self._assemble(v[i], list(instr_lists[i]), list(output_lists[i]))
                for i in range(images.data.shape[0])]

    # -- forward / loss -----------------------------------------------------

    def forward_hidden(self, rows: Tensor) -> Tensor:
        L = rows.data.shape[-2]
        return self.backbone.forward(rows, build_causal_mask(L), base_len=self.cfg.base_len)

    def logits(self, rows: Tensor) -> Tensor:
        h = self.forward_hidden(rows)
        return h @ self.tree["und.lm_head.w"] + self.tree["und.lm_head.b"]

    def ar_loss(self, seq: MultimodalSequence) -> Tensor:
        """Cross-entropy over the output span of one sequence."""
        if seq.n == seq.m:
            raise ValueError("output span is empty: nothing to predict")
        logits = self.logits(seq.rows)
        positions = np.arange(seq.m, seq.n)
        targets = seq.token_ids[positions + 1]
        loss = T.cross_entropy(logits[positions], targets)
        if not self.cfg.normalize_loss:
            loss = loss * float(len(positions))
        return loss

    def ar_loss_batch(self, seqs) -> Tensor:
        """Mean of per-sequence losses over a padded batch (one forward)."""
        if not seqs:
            raise ValueError("empty batch")
        if any(s.n == s.m for s in seqs):
            raise ValueError("output span is empty: nothing to predict")
        lmax = max(s.rows.data.shape[0] for s in seqs)
        d = seqs[0].rows.data.shape[1]
        padded = []
        for s in seqs:
            pad = lmax - s.rows.data.shape[0]
            r = s.rows if pad == 0 else T.concat([s.rows, Tensor(np.zeros((pad, d)))], axis=0)
            padded.append(r.reshape(1, lmax, d))
        logits = self.logits(T.concat(padded, axis=0))
        logp = logits.log_softmax(axis=-1)
        b_idx, pos_idx, tgt_idx, weight = [], [], [], []
        for bi, s in enumerate(seqs):
            count = s.n - s.m
            for pos in range(s.m, s.n):
                b_idx.append(bi)
                pos_idx.append(pos)
                tgt_idx.append(int(s.token_ids[pos + 1]))
                weight.append(1.0 / (count * len(seqs)))
        picked = logp[np.array(b_idx), np.array(pos_idx), np.array(tgt_idx)]
        w = weight if self.cfg.normalize_loss else [1.0 / len(seqs)] * len(weight)
        return -(picked * Tensor(np.array(w))).sum()

    # -- inference ----------------------------------------------------------

    def generate(self, image: Tensor, instr_ids, max_len: int = 64,
                 mode: str = "greedy", temperature: float = 1.0,
                 rng: np.random.Generator | None = None) -> list:
        """Decode output tokens after the delimiter. Returns ids without
        the trailing <eos>. Greedy ties resolve to the lowest token id."""
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode: {mode}")
        if mode == "sample" and rng is None:
            raise ValueError("sampling decode needs an rng")
        with T.no_grad():
            v = self.visual_rows(image.reshape(1, *image.data.shape))[0]
            prefix = T.concat([v, self.embed(list(instr_ids) + [REP])], axis=0)
            out = []
            rows = prefix
            for _ in range(max_len):
                logits = self.logits(rows).data[-1]
                if mode == "greedy":
                    nxt = int(np.argmax(logits))  # argmax takes first max: lowest id
                else:
                    z = (logits - logits.max()) / temperature
                    p = np.exp(z) / np.exp(z).sum()
                    nxt = int(rng.choice(len(p), p=p))
                if nxt == EOS:
                    break
                out.append(nxt)
                rows = T.concat([rows, self.embed([nxt])], axis=0)
        return out

    def encode_condition(self, report_ids, pad_to: int | None = None) -> Tensor:
        """Final hidden states of [<bos>, report, <eos>] under the causal
        mask; the conditioning interface for the generation branch.

        pad_to extends with <pad> tokens so a batch of conditions can share
        one length (causality keeps content rows unaffected).
        """
        ids = [BOS] + list(report_ids) + [EOS]
        if pad_to is not None:
            if pad_to < len(ids):
                raise ValueError(f"report needs {len(ids)} rows, pad_to={pad_to}")
            ids = ids + [PAD] * (pad_to - len(ids))
        return self.forward_hidden(self.embed(ids))

    def encode_condition_batch(self, reports_ids, pad_to: int) -> Tensor:
        rows = [self.embed([BOS] + list(r) + [EOS] + [PAD] * (pad_to - len(r) - 2))
                for r in reports_ids]
        stacked = T.concat([r.reshape(1, pad_to, -1) for r in rows], axis=0)
        return self.forward_hidden(stacked)
