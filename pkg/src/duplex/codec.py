"""Convolutional latent codec (4x spatial compression).

Trained once per run as a reconstruction autoencoder, then frozen; the
flow model lives entirely in its normalized latent space. Parameters are
kept in their own tree so branch freeze logic never has to see them.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .conv import conv3, down2, up2
from .optim import OptimizerState, adamw_step
from .params import Initializer, ParamTree
from .tensor import Tensor


@dataclasses.dataclass
class CodecConfig:
    latent_channels: int = 4
    width: int = 24          # channel count at the deepest spatial level
    factor: int = 4          # spatial compression, fixed by the two down2 steps


class LatentCodec:
    def __init__(self, cfg: CodecConfig | None = None, seed: int = 0):
        self.cfg = cfg or CodecConfig()
        self.tree = ParamTree()
        init = Initializer(np.random.default_rng(seed))
        w, lc = self.cfg.width, self.cfg.latent_channels
        tr = self.tree
        init.normal(tr, "codec.enc1.w", (3, 3, 1, w // 2))
        init.zeros(tr, "codec.enc1.b", (w // 2,))
        init.normal(tr, "codec.enc2.w", (4 * (w // 2), w))
        init.zeros(tr, "codec.enc2.b", (w,))
        init.normal(tr, "codec.enc3.w", (4 * w, w))
        init.zeros(tr, "codec.enc3.b", (w,))
        init.normal(tr, "codec.enc4.w", (3, 3, w, lc))
        init.zeros(tr, "codec.enc4.b", (lc,))
        init.normal(tr, "codec.dec1.w", (3, 3, lc, w))
        init.zeros(tr, "codec.dec1.b", (w,))
        init.normal(tr, "codec.dec2.w", (3, 3, w, w))
        init.zeros(tr, "codec.dec2.b", (w,))
        init.normal(tr, "codec.dec3.w", (3, 3, w, w // 2))
        init.zeros(tr, "codec.dec3.b", (w // 2,))
        init.normal(tr, "codec.dec4.w", (3, 3, w // 2, 1))
        init.zeros(tr, "codec.dec4.b", (1,))
        # normalization stats for the flow's latent space; set by pretraining
        init.zeros(tr, "codec.latent_mean", (lc,))
        init.ones(tr, "codec.latent_std", (lc,))

    def trainable_names(self):
        stats = ("codec.latent_mean", "codec.latent_std")
        return [n for n in self.tree.names() if n not in stats]

    def encode(self, images: Tensor) -> Tensor:
        """[B, H, W, 1] -> raw latents [B, H/4, W/4, c]."""
        tr = self.tree
        h = conv3(images, tr["codec.enc1.w"], tr["codec.enc1.b"]).gelu()
        h = down2(h, tr["codec.enc2.w"], tr["codec.enc2.b"]).gelu()
        h = down2(h, tr["codec.enc3.w"], tr["codec.enc3.b"]).gelu()
        return conv3(h, tr["codec.enc4.w"], tr["codec.enc4.b"])

    def decode(self, z: Tensor) -> Tensor:
        tr = self.tree
        h = conv3(z, tr["codec.dec1.w"], tr["codec.dec1.b"]).gelu()
        h = conv3(up2(h), tr["codec.dec2.w"], tr["codec.dec2.b"]).gelu()
        h = conv3(up2(h), tr["codec.dec3.w"], tr["codec.dec3.b"]).gelu()
        return conv3(h, tr["codec.dec4.w"], tr["codec.dec4.b"])

    # -- normalized latent space the flow model sees ------------------------

    def encode_norm(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            z = self.encode(Tensor(images)).data
        mean = self.tree["codec.latent_mean"].data
        std = self.tree["codec.latent_std"].data
        return (z - mean) / std

    def decode_denorm(self, z: np.ndarray) -> np.ndarray:
        mean = self.tree["codec.latent_mean"].data
        std = self.tree["codec.latent_std"].data
        with T.no_grad():
            img = self.decode(Tensor(z * std + mean)).data
        return np.clip(img, 0.0, 1.0)


def pretrain_codec(images: np.ndarray, seed: int = 0, steps: int = 400,
                   batch: int = 16, lr: float = 2e-3,
                   cfg: CodecConfig | None = None) -> LatentCodec:
    """Fit the autoencoder on [N, H, W, 1] images and freeze latent stats."""
    codec = LatentCodec(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = OptimizerState.for_params(codec.tree, codec.trainable_names())
    for step in range(steps):
        idx = rng.integers(0, images.shape[0], size=batch)
        x = Tensor(images[idx])
        recon = codec.decode(codec.encode(x))
        diff = recon - x
        loss = (diff * diff).mean()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"codec pretraining diverged at step {step}")
        codec.tree.clear_grads()
        T.backward(loss)
        adamw_step(codec.tree, opt, lr)
    with T.no_grad():
        lat = []
        for start in range(0, min(len(images), 512), 64):
            lat.append(codec.encode(Tensor(images[start:start + 64])).data)
        lat = np.concatenate(lat, axis=0)
    mean = lat.mean(axis=(0, 1, 2))
    std = lat.std(axis=(0, 1, 2)) + 1e-6
    codec.tree.set_value("codec.latent_mean", mean)
    codec.tree.set_value("codec.latent_std", std)
    return codec


def reconstruction_mse(codec: LatentCodec, images: np.ndarray) -> float:
    with T.no_grad():
        recon = codec.decode(codec.encode(Tensor(images))).data
    return float(np.mean((recon - images) ** 2))
