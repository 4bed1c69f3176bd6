"""duplex: a decoupled dual-branch multimodal model at desk scale.

An autoregressive understanding branch (image -> report) and a
flow-matching generation branch (report -> image) share one transformer
recipe and interact only through modality-routed joint attention. Pure
numpy/scipy; everything is deterministic given a seed.
"""

from .blocks import BlockConfig, attention, build_causal_mask, build_full_mask
from .crossmodal import UnifiedSequence, dual_qkv, joint_attention, modality_select
from .data import (FINDINGS, SceneSpec, clean_report, extract_labels, gen_corpus,
                   load_corpus, noisy_report, render, render_report,
                   report_vocabulary, save_corpus)
from .generation import (FlowState, GenerationModel, euler_sample, flow_loss,
                         flow_pair, repa_loss)
from .metrics import (MetricReport, ProbeNetwork, alignment_score, evaluate,
                      frechet_distance, kernel_distance, micro_macro_f1, prdc,
                      train_probe)
from .model import ModelBundle, ModelConfig
from .optim import OptimizerState, adamw_step
from .params import Initializer, ParamTree, branch_of
from .pipeline import (StageConfig, RunManifest, freeze_mask, run_ablation,
                       run_pipeline, run_stage)
from .tensor import Tensor, backward, grad_check, no_grad, rms_norm
from .understanding import (MultimodalSequence, UnderstandingModel, Vocabulary)

__version__ = "0.1.0"
