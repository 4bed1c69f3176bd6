"""Flow-matching generation branch.

Latent patches are linearly embedded, given a sinusoidal time embedding,
concatenated after the condition rows, and run through modality-routed
transformer blocks under a fully bidirectional mask. The model regresses
the rectified-flow velocity x1 - x0 along the straight path
x_t = (1 - t) x0 + t x1; sampling integrates the learned field with a
fixed-step Euler scheme from t = 0 to 1.

The representation-alignment term pulls an early hidden state toward
frozen probe features of the clean image (negative mean cosine).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, build_full_mask
from .crossmodal import DualBlock
from .params import Initializer, ParamTree
from .tensor import Tensor, rms_norm


@dataclasses.dataclass
class GenerationConfig:
    backbone: BlockConfig = dataclasses.field(default_factory=BlockConfig)
    latent_channels: int = 4
    cond_len: int = 24      # conditions are padded to this many rows
    latent_tokens: int = 64  # latent grid size the rotary base covers
    probe_dim: int = 32     # width of the alignment target features

    @property
    def base_len(self) -> int:
        return self.cond_len + self.latent_tokens

    @property
    def repa_layer(self) -> int:
        # 1-based index of the block whose output feeds the alignment term
        return max(1, self.backbone.num_layers // 3)


class GenerationModel:
    def __init__(self, tree: ParamTree, cfg: GenerationConfig, init: Initializer):
        self.cfg = cfg
        self.tree = tree
        d = cfg.backbone.d
        c = cfg.latent_channels
        init.normal(tree, "gen.latent_in.w", (c, d))
        init.zeros(tree, "gen.latent_in.b", (d,))
        init.normal(tree, "gen.time.w1", (d, d))
        init.zeros(tree, "gen.time.b1", (d,))
        init.normal(tree, "gen.time.w2", (d, d))
        init.zeros(tree, "gen.time.b2", (d,))
        self.blocks = [
            DualBlock(tree, f"gen.layer{i}", cfg.backbone, init)
            for i in range(cfg.backbone.num_layers)
        ]
        init.ones(tree, "gen.final_norm.w", (d,))
        init.normal(tree, "gen.latent_out.w", (d, c))
        init.zeros(tree, "gen.latent_out.b", (c,))
        init.normal(tree, "gen.repa.w", (d, cfg.probe_dim))
        init.zeros(tree, "gen.repa.b", (cfg.probe_dim,))

    def init_from_understanding(self, und_tree: ParamTree) -> None:
        """Copy the understanding backbone into this branch: both QKV sets
        start from the understanding attention weights; shared pieces copy
        one-to-one. Latent/time/alignment projections keep their init."""
        tree = self.tree
        for i in range(self.cfg.backbone.num_layers):
            src = f"und.backbone.layer{i}"
            dst = f"gen.layer{i}"
            qkv = ("wq", "wk", "wv") + (("bq", "bk", "bv") if self.cfg.backbone.qkv_bias else ())
            for name in qkv:
                for side in ("u", "g"):
                    tree.set_value(f"{dst}.attn.{side}.{name}",
                                   und_tree[f"{src}.attn.{name}"].data)
            shared = ["attn.wo", "attn.bo", "norm1.w", "norm2.w",
                      "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"]
            if self.cfg.backbone.qk_norm:
                shared += ["attn.q_norm", "attn.k_norm"]
            for name in shared:
                tree.set_value(f"{dst}.{name}", und_tree[f"{src}.{name}"].data)
        tree.set_value("gen.final_norm.w", und_tree["und.backbone.final_norm.w"].data)

    # -- forward -------------------------------------------------------------

    def time_embedding(self, t: np.ndarray) -> Tensor:
        """Sinusoidal features of t in [0, 1], refined by a two-layer MLP."""
        d = self.cfg.backbone.d
        half = d // 2
        freqs = np.exp(np.arange(half) * (math.log(10000.0) / half))
        angles = np.asarray(t, dtype=np.float64)[:, None] * freqs
        feats = Tensor(np.concatenate([np.sin(angles), np.cos(angles)], axis=1))
        tr = self.tree
        h = (feats @ tr["gen.time.w1"] + tr["gen.time.b1"]).gelu()
        return h @ tr["gen.time.w2"] + tr["gen.time.b2"]

    def velocity(self, cond: Tensor, x_t, t) -> tuple:
        """Predict the velocity field.

        cond: [B, T, d] condition rows (understanding hidden states).
        x_t: [B, h, w, c] noised latents. t: scalar or [B] times.
        Returns (velocity [B, h, w, c], alignment hidden [B, h*w, d]).
        """
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        bsz, h, w, c = x_t.shape
        if cond.shape[0] != bsz:
            raise ValueError(f"batch mismatch: cond {cond.shape[0]} vs latents {bsz}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,))
        tr = self.tree

        tokens = x_t.reshape(bsz, h * w, c) @ tr["gen.latent_in.w"] + tr["gen.latent_in.b"]
        tokens = tokens + self.time_embedding(t).reshape(bsz, 1, self.cfg.backbone.d)
        s = T.concat([cond, tokens], axis=1)
        boundary = cond.shape[1]
        L = s.shape[1]
        mask = build_full_mask(L)

        repa_hidden = None
        for i, block in enumerate(self.blocks):
            s = block.forward(s, boundary, mask, base_len=self.cfg.base_len)
            if i + 1 == self.cfg.repa_layer:
                repa_hidden = s[:, boundary:, :]
        s = rms_norm(s, tr["gen.final_norm.w"])
        v = s[:, boundary:, :] @ tr["gen.latent_out.w"] + tr["gen.latent_out.b"]
        return v.reshape(bsz, h, w, c), repa_hidden

    def repa_project(self, hidden: Tensor) -> Tensor:
        return hidden @ self.tree["gen.repa.w"] + self.tree["gen.repa.b"]


# -- rectified flow ----------------------------------------------------------


@dataclasses.dataclass
class FlowState:
    """One training draw on the straight path from noise x0 to data x1."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    x_t: np.ndarray
    u_t: np.ndarray


def flow_pair(x1: np.ndarray, rng: np.random.Generator, t: float | None = None) -> FlowState:
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    t = float(rng.random()) if t is None else float(t)
    return FlowState(x0=x0, x1=x1, t=t, x_t=(1.0 - t) * x0 + t * x1, u_t=x1 - x0)


def flow_loss(model: GenerationModel, cond: Tensor, states) -> tuple:
    """Velocity-matching MSE over a minibatch of FlowStates.

    Returns (loss, alignment hidden) so the caller can add the alignment
    term without a second forward."""
    x_t = Tensor(np.stack([s.x_t for s in states]))
    u_t = np.stack([s.u_t for s in states])
    t = np.array([s.t for s in states])
    v, hidden = model.velocity(cond, x_t, t)
    diff = v - u_t
    return (diff * diff).mean(), hidden


def repa_loss(model: GenerationModel, hidden: Tensor, target: np.ndarray) -> Tensor:
    """Negative mean cosine between projected hidden rows and probe rows.

    hidden: [B, N, d]; target: [B, N, probe_dim] (frozen, not differentiated).
    """
    proj = model.repa_project(hidden)
    if proj.shape != target.shape:
        raise ValueError(f"alignment shapes differ: {proj.shape} vs {target.shape}")
    tgt = Tensor(np.asarray(target, dtype=np.float64))
    dot = (proj * tgt).sum(axis=-1)
    pn = ((proj * proj).sum(axis=-1) + 1e-12).sqrt()
    tn = ((tgt * tgt).sum(axis=-1) + 1e-12).sqrt()
    return -(dot / (pn * tn)).mean()


def euler_sample(model: GenerationModel, cond: Tensor, shape: tuple, steps: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Integrate the velocity field from noise at t=0 to data at t=1.

    cond: [B, T, d]. shape: (h, w, c) of the latent grid. Returns [B, h, w, c].
    """
    if steps <= 0:
        raise ValueError(f"sampler needs at least one step, got {steps}")
    bsz = cond.shape[0]
    x = rng.standard_normal((bsz,) + tuple(shape))
    dt = 1.0 / steps
    with T.no_grad():
        for i in range(steps):
            t = np.full(bsz, i * dt)
            v, _ = model.velocity(cond, Tensor(x), t)
            x = x + dt * v.data
            if not np.isfinite(x).all():
                raise FloatingPointError(f"sampling diverged at step {i}")
    return x
