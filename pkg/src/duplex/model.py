"""Bundled dual-branch model: one parameter tree, both branches.

The understanding branch is built first; the generation backbone then
copies its (randomly initialized) attention and MLP weights, so both
branches start from the same transformer state.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import checkpoint as ckpt_io
from .blocks import BlockConfig
from .data import report_vocabulary
from .generation import GenerationConfig, GenerationModel
from .params import Initializer, ParamTree
from .understanding import UnderstandingConfig, UnderstandingModel, Vocabulary


@dataclasses.dataclass
class ModelConfig:
    und: UnderstandingConfig
    gen: GenerationConfig

    @staticmethod
    def desk(vocab_size: int) -> "ModelConfig":
        backbone = BlockConfig(d=128, num_heads=4, mlp_hidden=512, num_layers=4)
        # longest clean report: six findings at nine tokens each, plus bos/eos
        return ModelConfig(
            und=UnderstandingConfig(vocab_size=vocab_size, backbone=backbone),
            gen=GenerationConfig(backbone=backbone, cond_len=56, latent_tokens=64),
        )


class ModelBundle:
    """Vocabulary, both branch models, and their shared parameter tree."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.tree = ParamTree()
        init = Initializer(np.random.default_rng(seed))
        self.und = UnderstandingModel(self.tree, cfg.und, init)
        self.gen = GenerationModel(self.tree, cfg.gen, init)
        self.gen.init_from_understanding(self.tree)

    @staticmethod
    def build(seed: int = 0) -> "ModelBundle":
        vocab = Vocabulary(report_vocabulary())
        return ModelBundle(ModelConfig.desk(len(vocab)), vocab, seed=seed)

    def save(self, path, state=None) -> None:
        ckpt_io.save(path, self.tree, state)

    def load(self, path) -> ckpt_io.Checkpoint:
        ckpt = ckpt_io.load(path)
        self.tree.load_values(ckpt.params)
        return ckpt

    @staticmethod
    def from_checkpoint(path, seed: int = 0) -> "ModelBundle":
        bundle = ModelBundle.build(seed=seed)
        bundle.load(path)
        return bundle
