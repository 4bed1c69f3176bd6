"""Transformer building blocks shared by both branches.

Pre-norm residual blocks with RMS normalization, multi-head scaled
dot-product attention with per-head QK normalization, and rotary position
encoding. When a sequence outgrows the rotary base length the position
indices are compressed by ``base_len / L`` (position interpolation), which
lets weights trained at one sequence length run at a longer one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import Initializer, ParamTree
from .tensor import Tensor, concat, rms_norm

MAX_EXTENSION = 4  # longest supported sequence, as a multiple of base_len


@dataclass
class BlockConfig:
    d: int = 128
    num_heads: int = 4
    mlp_hidden: int = 512
    num_layers: int = 4
    qk_norm: bool = True
    qkv_bias: bool = True

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ValueError(f"model dim {self.d} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads


def build_causal_mask(L: int) -> np.ndarray:
    """Boolean [L, L] mask, mask[i, j] true iff token i may attend to j <= i."""
    return np.tril(np.ones((L, L), dtype=bool))


def build_full_mask(L: int) -> np.ndarray:
    """All-true mask for joint bidirectional attention."""
    return np.ones((L, L), dtype=bool)


def rope_tables(L: int, dim: int, base_len: int, theta: float = 10000.0):
    """cos/sin tables [L, dim//2]; positions interpolated when L > base_len."""
    if dim % 2:
        raise ValueError("rotary dimension must be even")
    if L > MAX_EXTENSION * base_len:
        raise ValueError(f"sequence length {L} exceeds extended capacity {MAX_EXTENSION * base_len}")
    pos = np.arange(L, dtype=np.float64)
    if L > base_len:
        pos = pos * (base_len / L)
    inv_freq = theta ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = np.outer(pos, inv_freq)
    return np.cos(angles), np.sin(angles)


def apply_positions(x: Tensor, base_len: int, head_dim: int | None = None) -> Tensor:
    """Rotate adjacent feature pairs of [..., L, d] by position-dependent angles."""
    L, d = x.shape[-2], x.shape[-1]
    hd = head_dim if head_dim is not None else d
    cos, sin = rope_tables(L, hd, base_len)
    # broadcast over heads: tables are [L, hd//2], x pairs are [..., L, hd//2]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    half = hd // 2
    stacked = concat(
        [r_even.reshape(*r_even.shape, 1), r_odd.reshape(*r_odd.shape, 1)], axis=-1
    )
    return stacked.reshape(*x.shape[:-1], d)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, L, d = x.shape
    x = x.reshape(*lead, L, num_heads, d // num_heads)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes)  # [..., H, L, hd]


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, hd = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes).reshape(*lead, L, H * hd)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, num_heads: int,
              out_w: Tensor, out_b: Tensor | None = None,
              q_norm: Tensor | None = None, k_norm: Tensor | None = None,
              base_len: int | None = None) -> Tensor:
    """Masked multi-head attention over already-projected Q, K, V of width d.

    Heads are split internally; per head, Q and K are RMS-normalized (when
    norm weights are given), rotated by position, and combined as
    softmax(QK^T / sqrt(head_dim)) V. Masked positions receive -inf before
    the softmax. Head outputs are concatenated and projected by `out_w`.
    """
    L = q.shape[-2]
    if mask.shape != (L, L):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {L}")
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ValueError(f"attention: token {bad} has no attendable position")

    hd = q.shape[-1] // num_heads
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    vh = _split_heads(v, num_heads)
    if q_norm is not None:
        qh = rms_norm(qh, q_norm)
    if k_norm is not None:
        kh = rms_norm(kh, k_norm)
    if base_len is not None:
        qh = apply_positions(qh, base_len, head_dim=hd)
        kh = apply_positions(kh, base_len, head_dim=hd)

    scores = qh @ kh.transpose(*range(qh.data.ndim - 2), qh.data.ndim - 1, qh.data.ndim - 2)
    scores = scores * (1.0 / np.sqrt(hd))
    bias = np.where(mask, 0.0, -np.inf)
    scores = scores + bias
    weights = scores.softmax(axis=-1)
    ctx = _merge_heads(weights @ vh)
    out = ctx @ out_w
    if out_b is not None:
        out = out + out_b
    return out


class TransformerBlock:
    """Pre-norm residual block: RMS-norm, attention, RMS-norm, GELU MLP."""

    def __init__(self, tree: ParamTree, prefix: str, cfg: BlockConfig, init: Initializer):
        self.tree = tree
        self.prefix = prefix
        self.cfg = cfg
        d, hd, mh = cfg.d, cfg.head_dim, cfg.mlp_hidden
        init.ones(tree, f"{prefix}.norm1.w", (d,))
        for name in ("wq", "wk", "wv"):
            init.normal(tree, f"{prefix}.attn.{name}", (d, d))
        if cfg.qkv_bias:
            for name in ("bq", "bk", "bv"):
                init.zeros(tree, f"{prefix}.attn.{name}", (d,))
        if cfg.qk_norm:
            init.ones(tree, f"{prefix}.attn.q_norm", (hd,))
            init.ones(tree, f"{prefix}.attn.k_norm", (hd,))
        init.normal(tree, f"{prefix}.attn.wo", (d, d))
        init.zeros(tree, f"{prefix}.attn.bo", (d,))
        init.ones(tree, f"{prefix}.norm2.w", (d,))
        init.normal(tree, f"{prefix}.mlp.w1", (d, mh))
        init.zeros(tree, f"{prefix}.mlp.b1", (mh,))
        init.normal(tree, f"{prefix}.mlp.w2", (mh, d))
        init.zeros(tree, f"{prefix}.mlp.b2", (d,))

    def _p(self, name: str) -> Tensor:
        return self.tree[f"{self.prefix}.{name}"]

    def project_qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        q = x @ self._p("attn.wq")
        k = x @ self._p("attn.wk")
        v = x @ self._p("attn.wv")
        if self.cfg.qkv_bias:
            q = q + self._p("attn.bq")
            k = k + self._p("attn.bk")
            v = v + self._p("attn.bv")
        return q, k, v

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, base_len: int) -> Tensor:
        return attention(
            q, k, v, mask, self.cfg.num_heads,
            out_w=self._p("attn.wo"), out_b=self._p("attn.bo"),
            q_norm=self._p("attn.q_norm") if self.cfg.qk_norm else None,
            k_norm=self._p("attn.k_norm") if self.cfg.qk_norm else None,
            base_len=base_len,
        )

    def mlp(self, x: Tensor) -> Tensor:
        h = (x @ self._p("mlp.w1") + self._p("mlp.b1")).gelu()
        return h @ self._p("mlp.w2") + self._p("mlp.b2")

    def forward(self, x: Tensor, mask: np.ndarray, base_len: int) -> Tensor:
        h = rms_norm(x, self._p("norm1.w"))
        q, k, v = self.project_qkv(h)
        x = x + self.attend(q, k, v, mask, base_len)
        x = x + self.mlp(rms_norm(x, self._p("norm2.w")))
        return x


def block_forward(x: Tensor, mask: np.ndarray, block: TransformerBlock,
                  base_len: int | None = None) -> Tensor:
    return block.forward(x, mask, base_len if base_len is not None else x.shape[-2])


class TransformerStack:
    """A stack of blocks with a final RMS norm."""

    def __init__(self, tree: ParamTree, prefix: str, cfg: BlockConfig, init: Initializer):
        self.cfg = cfg
        self.blocks = [
            TransformerBlock(tree, f"{prefix}.layer{i}", cfg, init)
            for i in range(cfg.num_layers)
        ]
        self.final_norm = init.ones(tree, f"{prefix}.final_norm.w", (cfg.d,))

    def forward(self, x: Tensor, mask: np.ndarray, base_len: int) -> Tensor:
        for block in self.blocks:
            x = block.forward(x, mask, base_len)
        return rms_norm(x, self.final_norm)
