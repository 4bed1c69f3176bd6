"""Cross-modal attention with per-modality QKV projections.

The generation branch attends over one unified sequence: condition rows
produced by the understanding branch followed by noised latent rows. Each
row is routed to exactly one of two QKV parameter sets by its modality
selector; attention itself is fully bidirectional and the output
projection, QK norms, MLP and layer norms are shared across modalities.

dual_qkv computes both projections for the full sequence and then keeps
the understanding rows from one and the generation rows from the other.
That is algebraically the selector sum (the discarded half has zero
selector) and keeps the collapsed case W_g == W_u bit-identical to a
single shared projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockConfig, attention
from .params import Initializer, ParamTree
from .tensor import Tensor, concat, rms_norm

_QKV_NAMES = ("wq", "wk", "wv", "bq", "bk", "bv")


@dataclass
class UnifiedSequence:
    """Rows [..., L, d]; rows before `boundary` are condition (understanding)
    rows, rows from `boundary` on are generation rows."""

    rows: Tensor
    boundary: int

    def __post_init__(self):
        L = self.rows.shape[-2]
        if not 0 <= self.boundary <= L:
            raise ValueError(f"boundary {self.boundary} outside [0, {L}]")

    @property
    def length(self) -> int:
        return self.rows.shape[-2]


def modality_select(i: int, b: int, length: int | None = None) -> tuple:
    """Selector pair (delta_u, delta_g) for row i with boundary b."""
    if i < 0 or (length is not None and i >= length):
        raise IndexError(f"row index {i} out of range")
    return (1, 0) if i < b else (0, 1)


@dataclass
class DualProjection:
    """The two QKV parameter sets of one cross-modal layer."""

    u: dict  # name -> Tensor, keys wq wk wv (and bq bk bv when biased)
    g: dict

    def project(self, h: Tensor, which: str):
        side = self.u if which == "u" else self.g
        q = h @ side["wq"]
        k = h @ side["wk"]
        v = h @ side["wv"]
        if "bq" in side:
            q = q + side["bq"]
            k = k + side["bk"]
            v = v + side["bv"]
        return q, k, v


def dual_qkv(seq: UnifiedSequence, proj: DualProjection):
    """Project every row with its own modality's parameters."""
    b = seq.boundary
    qu, ku, vu = proj.project(seq.rows, "u")
    qg, kg, vg = proj.project(seq.rows, "g")

    def route(u: Tensor, g: Tensor) -> Tensor:
        return concat([u[..., :b, :], g[..., b:, :]], axis=-2)

    return route(qu, qg), route(ku, kg), route(vu, vg)


def joint_attention(seq: UnifiedSequence, proj: DualProjection, mask: np.ndarray,
                    num_heads: int, out_w: Tensor, out_b: Tensor | None = None,
                    q_norm: Tensor | None = None, k_norm: Tensor | None = None,
                    base_len: int | None = None) -> Tensor:
    q, k, v = dual_qkv(seq, proj)
    return attention(q, k, v, mask, num_heads, out_w=out_w, out_b=out_b,
                     q_norm=q_norm, k_norm=k_norm, base_len=base_len)


class DualBlock:
    """Pre-norm residual block whose attention is modality-routed.

    Parameter layout mirrors TransformerBlock with the QKV set split into
    `attn.u.*` and `attn.g.*`; everything else (out projection, QK norms,
    MLP, layer norms) is shared."""

    def __init__(self, tree: ParamTree, prefix: str, cfg: BlockConfig, init: Initializer):
        self.tree = tree
        self.prefix = prefix
        self.cfg = cfg
        d, hd, mh = cfg.d, cfg.head_dim, cfg.mlp_hidden
        init.ones(tree, f"{prefix}.norm1.w", (d,))
        for side in ("u", "g"):
            for name in ("wq", "wk", "wv"):
                init.normal(tree, f"{prefix}.attn.{side}.{name}", (d, d))
            if cfg.qkv_bias:
                for name in ("bq", "bk", "bv"):
                    init.zeros(tree, f"{prefix}.attn.{side}.{name}", (d,))
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

    def projection(self) -> DualProjection:
        names = _QKV_NAMES if self.cfg.qkv_bias else _QKV_NAMES[:3]
        return DualProjection(
            u={n: self._p(f"attn.u.{n}") for n in names},
            g={n: self._p(f"attn.g.{n}") for n in names},
        )

    def mlp(self, x: Tensor) -> Tensor:
        h = (x @ self._p("mlp.w1") + self._p("mlp.b1")).gelu()
        return h @ self._p("mlp.w2") + self._p("mlp.b2")

    def forward(self, x: Tensor, boundary: int, mask: np.ndarray, base_len: int) -> Tensor:
        h = rms_norm(x, self._p("norm1.w"))
        attn_out = joint_attention(
            UnifiedSequence(h, boundary), self.projection(), mask,
            self.cfg.num_heads,
            out_w=self._p("attn.wo"), out_b=self._p("attn.bo"),
            q_norm=self._p("attn.q_norm") if self.cfg.qk_norm else None,
            k_norm=self._p("attn.k_norm") if self.cfg.qk_norm else None,
            base_len=base_len,
        )
        x = x + attn_out
        x = x + self.mlp(rms_norm(x, self._p("norm2.w")))
        return x
