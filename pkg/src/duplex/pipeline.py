"""Three-stage training schedule with branch freezing, plus the
freeze/mixing ablation grid.

Stage 1 trains the understanding branch on report generation with the
generation branch frozen. Stage 2 re-initializes the generation backbone
from the (now trained) understanding weights and trains it on flow
matching plus the alignment regularizer, understanding frozen. Stage 3
doubles the image resolution, drops the regularizer, and keeps training
the generation branch; rotary position interpolation absorbs the longer
latent sequence.

All artifacts under a run directory are byte-deterministic for a fixed
seed; wall-clock goes to a separate .time.txt sidecar so manifests stay
comparable across runs.
"""

from __future__ import annotations

import dataclasses
import os
import subprocess
import time

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .codec import LatentCodec, pretrain_codec, reconstruction_mse
from .data import corpus_hash, extract_labels, render, train_test_split
from .generation import flow_loss, flow_pair, repa_loss
from .metrics import (ProbeNetwork, _chunked, frechet_distance,
                      generate_for_conditions, kernel_distance, load_probe,
                      micro_macro_f1, probe_accuracy, probe_hash, save_probe,
                      train_probe)
from .model import ModelBundle
from .optim import OptimizerState, adamw_step
from .params import GENERATION, UNDERSTANDING, ParamTree, branch_of
from .tensor import Tensor
from .understanding import BOS, EOS, REP

_VALID_TAGS = (UNDERSTANDING, GENERATION)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint):
        super().__init__(f"loss became non-finite at step {step}; "
                         f"last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclasses.dataclass
class StageConfig:
    stage: int
    learning_rate: float
    warmup_steps: int
    total_steps: int
    resolution: int
    use_repa: bool
    repa_weight: float
    batch_size: int
    freeze: tuple
    mixing_ratio: tuple
    scale: int = 50

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        for tag in self.freeze:
            if tag not in _VALID_TAGS:
                raise ValueError(f"unknown freeze tag {tag!r}")
        want = GENERATION if self.stage == 1 else UNDERSTANDING
        if want not in self.freeze:
            raise ValueError(f"stage {self.stage} must freeze the "
                             f"{want} branch")
        if self.stage == 3 and self.use_repa:
            raise ValueError("stage 3 drops the alignment regularizer")

    @staticmethod
    def table_defaults(stage: int, scale: int = 50) -> "StageConfig":
        """Reference schedule scaled down by `scale` (step counts only)."""
        if stage == 1:
            return StageConfig(
                stage=1, learning_rate=1e-4,
                warmup_steps=max(1, round(80 / scale)),
                total_steps=max(1, round(3840 / scale)),
                resolution=32, use_repa=False, repa_weight=0.0,
                batch_size=16, freeze=(GENERATION,), mixing_ratio=(1, 0),
                scale=scale)
        if stage == 2:
            return StageConfig(
                stage=2, learning_rate=2e-4,
                warmup_steps=max(1, round(2000 / scale)),
                total_steps=max(1, round(75000 / scale)),
                resolution=32, use_repa=True, repa_weight=0.5,
                batch_size=16, freeze=(UNDERSTANDING,), mixing_ratio=(0, 1),
                scale=scale)
        if stage == 3:
            return StageConfig(
                stage=3, learning_rate=1e-4, warmup_steps=0,
                total_steps=max(1, round(5000 / scale)),
                resolution=64, use_repa=False, repa_weight=0.0,
                batch_size=16, freeze=(UNDERSTANDING,), mixing_ratio=(0, 1),
                scale=scale)
        raise ValueError(f"no such stage: {stage}")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "freeze":
                v = ",".join(v)
            elif f.name == "mixing_ratio":
                v = f"{v[0]}:{v[1]}"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "StageConfig":
        raw = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, val = (part.strip() for part in line.split("=", 1))
            raw[key] = val
        kwargs = {
            "stage": int(raw["stage"]),
            "learning_rate": float(raw["learning_rate"]),
            "warmup_steps": int(raw["warmup_steps"]),
            "total_steps": int(raw["total_steps"]),
            "resolution": int(raw["resolution"]),
            "use_repa": raw["use_repa"].lower() in ("true", "1", "yes"),
            "repa_weight": float(raw["repa_weight"]),
            "batch_size": int(raw["batch_size"]),
            "freeze": tuple(t for t in raw["freeze"].split(",") if t),
            "mixing_ratio": tuple(int(x) for x in raw["mixing_ratio"].split(":")),
        }
        if "scale" in raw:
            kwargs["scale"] = int(raw["scale"])
        return StageConfig(**kwargs)


@dataclasses.dataclass
class RunManifest:
    """Flat key-value record written next to every checkpoint."""

    entries: dict

    def to_text(self) -> str:
        return "\n".join(f"{k} = {self.entries[k]}" for k in sorted(self.entries)) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @staticmethod
    def load(path) -> "RunManifest":
        entries = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    k, v = line.split(" = ", 1)
                    entries[k] = v.strip()
        return RunManifest(entries)


def freeze_mask(tree: ParamTree, frozen_tags) -> list:
    """Names of trainable parameters: the complement of the frozen tags."""
    for tag in frozen_tags:
        if tag not in _VALID_TAGS:
            raise ValueError(f"unknown freeze tag {tag!r}")
    trainable = [n for n in tree.names() if branch_of(n) not in frozen_tags]
    if not trainable:
        raise ValueError("freeze mask leaves no trainable parameters")
    return sorted(trainable)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _lr_at(cfg: StageConfig, step: int) -> float:
    # linear ramp over warmup_steps (1-indexed), then constant
    if cfg.warmup_steps > 0 and step + 1 <= cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


def _images_at(samples, resolution: int) -> np.ndarray:
    out = []
    for s in samples:
        out.append(s.image if s.image.shape[0] == resolution else render(s.spec, resolution))
    return np.stack(out)


class _EpochSampler:
    """Deterministic shuffled index stream over a dataset."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._queue: list = []

    def take(self, k: int) -> list:
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.n))
            out.append(self._queue.pop())
        return out


def _und_batch_loss(bundle: ModelBundle, images: np.ndarray, token_ids, idx) -> Tensor:
    batch_imgs = Tensor(images[idx])
    instr = [[BOS]] * len(idx)
    outputs = [[REP] + token_ids[i] + [EOS] for i in idx]
    seqs = bundle.und.build_sequences(batch_imgs, instr, outputs)
    return bundle.und.ar_loss_batch(seqs)


def _repa_cosine(bundle: ModelBundle, cond: np.ndarray, latents: np.ndarray,
                 feats: np.ndarray, seed: int) -> float:
    """Mean cosine between projected flow hiddens and probe features on a
    fixed probe batch (higher = better aligned)."""
    rng = np.random.default_rng(seed)
    n = min(32, len(latents))
    states = [flow_pair(latents[i], rng) for i in range(n)]
    with T.no_grad():
        loss, hidden = flow_loss(bundle.gen, Tensor(cond[:n]), states)
        return -float(repa_loss(bundle.gen, hidden, feats[:n]).data)


def run_stage(cfg: StageConfig, samples, bundle: ModelBundle, run_dir,
              seed: int, codec: LatentCodec | None = None,
              probe: ProbeNetwork | None = None) -> RunManifest:
    """Train one stage and write checkpoint + manifest + loss log.

    Expects `bundle` to already hold the previous stage's weights (the
    stage-k manifest in run_dir is required for k > 1). Stage 2 starts by
    re-initializing the generation backbone from the trained understanding
    branch.
    """
    os.makedirs(run_dir, exist_ok=True)
    if cfg.stage > 1:
        prev = os.path.join(run_dir, f"stage{cfg.stage - 1}.manifest.txt")
        if not os.path.exists(prev):
            raise FileNotFoundError(
                f"stage {cfg.stage} needs the stage {cfg.stage - 1} manifest at {prev}")
    if cfg.stage >= 2:
        if codec is None:
            raise ValueError("stages 2-3 need the latent codec")
        if cfg.use_repa and probe is None:
            raise ValueError("the alignment regularizer needs the probe network")
    if cfg.stage == 2:
        bundle.gen.init_from_understanding(bundle.tree)

    t_start = time.monotonic()
    train, _ = train_test_split(samples)
    rng = np.random.default_rng(np.random.SeedSequence([seed, cfg.stage, 11]))
    sampler = _EpochSampler(len(train), np.random.default_rng(np.random.SeedSequence([seed, cfg.stage, 12])))

    trainable = freeze_mask(bundle.tree, cfg.freeze)
    if cfg.stage >= 2 and not cfg.use_repa:
        # alignment head sits outside the objective; AdamW would leave it
        # bit-identical anyway, and the optimizer rejects grad-less params
        trainable = [n for n in trainable if not n.startswith("gen.repa.")]
    opt = OptimizerState.for_params(bundle.tree, trainable)

    token_ids = None
    images = cond = latents = grid_feats = None
    if cfg.stage == 1:
        images = _images_at(train, cfg.resolution)
        token_ids = [bundle.vocab.encode(s.report) for s in train]
    else:
        images = _images_at(train, cfg.resolution)
        latents = np.concatenate([codec.encode_norm(images[i:i + 64])
                                  for i in range(0, len(images), 64)], axis=0)
        with T.no_grad():
            reports = [bundle.vocab.encode(s.report) for s in train]
            cond = np.concatenate([
                bundle.und.encode_condition_batch(reports[i:i + 64],
                                                  pad_to=bundle.cfg.gen.cond_len).data
                for i in range(0, len(reports), 64)], axis=0)
        if cfg.use_repa:
            base_images = _images_at(train, 32)
            grid_feats = np.concatenate([probe.grid_features(base_images[i:i + 64])
                                         for i in range(0, len(base_images), 64)], axis=0)

    repa_start = repa_end = None
    if cfg.stage == 2 and cfg.use_repa:
        repa_start = _repa_cosine(bundle, cond, latents, grid_feats, seed)

    ckpt_every = max(1, cfg.total_steps // 5)
    last_ckpt = None
    losses = []
    mix_und = mix_gen = 0
    for step in range(cfg.total_steps):
        idx = sampler.take(cfg.batch_size)
        if cfg.stage == 1:
            loss = _und_batch_loss(bundle, images, token_ids, idx)
            mix_und += len(idx)
        else:
            states = [flow_pair(latents[i], rng) for i in idx]
            loss, hidden = flow_loss(bundle.gen, Tensor(cond[idx]), states)
            if cfg.use_repa:
                loss = loss + cfg.repa_weight * repa_loss(
                    bundle.gen, hidden, grid_feats[idx])
            mix_gen += len(idx)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(step, last_ckpt)
        bundle.tree.clear_grads()
        T.backward(loss)
        adamw_step(bundle.tree, opt, _lr_at(cfg, step))
        losses.append(float(loss.data))
        if (step + 1) % ckpt_every == 0 and step + 1 < cfg.total_steps:
            last_ckpt = os.path.join(run_dir, f"stage{cfg.stage}.step{step + 1}.ckpt")
            bundle.save(last_ckpt, opt)

    if cfg.stage == 2 and cfg.use_repa:
        repa_end = _repa_cosine(bundle, cond, latents, grid_feats, seed)

    ckpt_path = os.path.join(run_dir, f"stage{cfg.stage}.ckpt")
    bundle.save(ckpt_path, opt)
    with open(os.path.join(run_dir, f"stage{cfg.stage}.losses.txt"), "w") as fh:
        fh.writelines(f"{v}\n" for v in losses)

    entries = {f"config.{f.name}": getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    entries["config.freeze"] = ",".join(cfg.freeze)
    entries["config.mixing_ratio"] = f"{cfg.mixing_ratio[0]}:{cfg.mixing_ratio[1]}"
    entries.update({
        "seed": seed,
        "stage": cfg.stage,
        "dataset_hash": corpus_hash(samples),
        "git": _git_describe(),
        "steps_completed": len(losses),
        "final_loss": losses[-1],
        "mean_loss_tail": float(np.mean(losses[-10:])),
        "n_trainable": len(trainable),
        "n_frozen": len(bundle.tree) - len(trainable),
        "mix_und_samples": mix_und,
        "mix_gen_samples": mix_gen,
    })
    if codec is not None and cfg.stage >= 2:
        entries["codec_hash"] = _tree_hash(codec.tree)
    if probe is not None and cfg.stage >= 2:
        entries["probe_hash"] = probe_hash(probe)
    if repa_start is not None:
        entries["repa_cosine_start"] = repa_start
        entries["repa_cosine_end"] = repa_end
    manifest = RunManifest(entries)
    manifest.save(os.path.join(run_dir, f"stage{cfg.stage}.manifest.txt"))
    with open(os.path.join(run_dir, f"stage{cfg.stage}.time.txt"), "w") as fh:
        fh.write(f"wall_clock_seconds = {time.monotonic() - t_start:.3f}\n")
    return manifest


def _tree_hash(tree: ParamTree) -> str:
    import hashlib
    return hashlib.sha256(ckpt_io.serialize(tree)).hexdigest()


def run_pipeline(samples, run_dir, seed: int = 0, scale: int = 50,
                 configs: dict | None = None,
                 codec_steps: int = 400, probe_steps: int = 600):
    """Full schedule: init, stage 1, codec + probe pretraining, stages 2-3.

    Returns (bundle, codec, probe, manifests). Every artifact in run_dir,
    wall-clock sidecars aside, is a pure function of (samples, seed,
    configs).
    """
    os.makedirs(run_dir, exist_ok=True)
    cfgs = {k: (configs or {}).get(k) or StageConfig.table_defaults(k, scale)
            for k in (1, 2, 3)}

    bundle = ModelBundle.build(seed=seed)
    bundle.save(os.path.join(run_dir, "init.ckpt"))
    manifests = {}
    manifests[1] = run_stage(cfgs[1], samples, bundle, run_dir, seed)

    train, _ = train_test_split(samples)
    train_images = _images_at(train, 32)
    codec = pretrain_codec(train_images, seed=seed + 100, steps=codec_steps)
    ckpt_io.save(os.path.join(run_dir, "codec.ckpt"), codec.tree)
    labels = np.stack([s.labels for s in train])
    probe = train_probe(train_images, labels, seed=seed + 200, steps=probe_steps)
    save_probe(os.path.join(run_dir, "probe.ckpt"), probe)
    side = RunManifest({
        "codec_hash": _tree_hash(codec.tree),
        "codec_recon_mse": reconstruction_mse(codec, train_images[:128]),
        "probe_hash": probe_hash(probe),
        "probe_accuracy": probe_accuracy(probe, train_images[:256], labels[:256]),
    })
    side.save(os.path.join(run_dir, "artifacts.manifest.txt"))

    manifests[2] = run_stage(cfgs[2], samples, bundle, run_dir, seed, codec, probe)
    manifests[3] = run_stage(cfgs[3], samples, bundle, run_dir, seed, codec, probe)
    return bundle, codec, probe, manifests


# -- ablation grid -------------------------------------------------------------

ABLATION_GRID = (
    ("frozen_0:1", (UNDERSTANDING,), (0, 1)),
    ("unfrozen_1:1", (), (1, 1)),
    ("unfrozen_1:2", (), (1, 2)),
    ("unfrozen_1:4", (), (1, 4)),
    ("unfrozen_0:1", (), (0, 1)),
)


def _eval_f1(bundle: ModelBundle, test_samples, cap: int = 48) -> tuple:
    sub = test_samples[:cap]
    pred, true = [], []
    for s in sub:
        ids = bundle.und.generate(Tensor(s.image), [BOS])
        pred.append(extract_labels(bundle.vocab.decode(ids)))
        true.append(extract_labels(s.report))
    return micro_macro_f1(true, pred)


def run_ablation(samples, stage2_dir, out_path, seed: int = 0,
                 steps: int = 150, batch_size: int = 16,
                 learning_rate: float = 2e-4, grid=ABLATION_GRID,
                 eval_cap: int = 48) -> list:
    """Fine-tune from the stage-2 checkpoint under each freeze/mixing row
    and score comprehension (F1) and generation (FD, KD) per row.

    Mixing r:s means r understanding and s generation samples per batch
    unit; k = batch_size // (r + s) units per batch. The mixed loss is the
    sample-count-weighted mean of the two task losses.
    """
    stage2_ckpt = os.path.join(stage2_dir, "stage2.ckpt")
    for need in (stage2_ckpt, os.path.join(stage2_dir, "stage1.manifest.txt"),
                 os.path.join(stage2_dir, "stage2.manifest.txt")):
        if not os.path.exists(need):
            raise FileNotFoundError(f"ablation needs stage-1/2 artifacts: {need} missing")
    codec = LatentCodec()
    codec.tree.load_values(ckpt_io.load(os.path.join(stage2_dir, "codec.ckpt")).params)
    probe = load_probe(os.path.join(stage2_dir, "probe.ckpt"))

    train, test = train_test_split(samples)
    images = _images_at(train, 32)
    latents = np.concatenate([codec.encode_norm(images[i:i + 64])
                              for i in range(0, len(images), 64)], axis=0)
    rows = []
    baseline_f1 = None
    token_ids = None
    for name, freeze, (r, s) in grid:
        bundle = ModelBundle.from_checkpoint(stage2_ckpt, seed=seed)
        if baseline_f1 is None:
            baseline_f1 = _eval_f1(bundle, test, cap=eval_cap)
        if token_ids is None:
            token_ids = [bundle.vocab.encode(x.report) for x in train]
        k = batch_size // (r + s)
        n_u, n_g = r * k, s * k
        if n_g == 0:
            raise ValueError(f"ablation row {name} trains no generation samples")

        rng = np.random.default_rng(np.random.SeedSequence([seed, 31, r, s, len(freeze)]))
        sampler = _EpochSampler(len(train), np.random.default_rng(
            np.random.SeedSequence([seed, 32, r, s, len(freeze)])))
        frozen_und = UNDERSTANDING in freeze
        trainable = [n for n in freeze_mask(bundle.tree, freeze)
                     if not n.startswith("gen.repa.")]  # flow-only objective
        if not frozen_und and n_u == 0:
            # flow loss reaches understanding only through condition encoding
            keep = ("und.embed.", "und.backbone.")
            trainable = [n for n in trainable
                         if not n.startswith("und.") or n.startswith(keep)]
        opt = OptimizerState.for_params(bundle.tree, trainable)
        cond_cache = None
        if frozen_und:
            with T.no_grad():
                cond_cache = np.concatenate([
                    bundle.und.encode_condition_batch(token_ids[i:i + 64],
                                                      pad_to=bundle.cfg.gen.cond_len).data
                    for i in range(0, len(token_ids), 64)], axis=0)

        for step in range(steps):
            parts = []
            if n_u:
                idx_u = sampler.take(n_u)
                parts.append((n_u, _und_batch_loss(bundle, images, token_ids, idx_u)))
            idx_g = sampler.take(n_g)
            states = [flow_pair(latents[i], rng) for i in idx_g]
            if frozen_und:
                cond = Tensor(cond_cache[idx_g])
            else:
                cond = bundle.und.encode_condition_batch(
                    [token_ids[i] for i in idx_g], pad_to=bundle.cfg.gen.cond_len)
            gen_loss, _ = flow_loss(bundle.gen, cond, states)
            parts.append((n_g, gen_loss))
            total = sum(w for w, _ in parts)
            loss = sum((w / total) * l for w, l in parts)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(step, stage2_ckpt)
            bundle.tree.clear_grads()
            T.backward(loss)
            adamw_step(bundle.tree, opt, learning_rate)

        micro, macro = _eval_f1(bundle, test, cap=eval_cap)
        gen_rng = np.random.default_rng(np.random.SeedSequence([seed, 33, r, s, len(freeze)]))
        gen_sub = test[:max(probe.cfg.d_p + 1, 40)]
        gen_imgs = generate_for_conditions(bundle, codec, [x.report for x in gen_sub],
                                           32, 20, gen_rng)
        real_feats = _chunked(probe.features, _images_at(gen_sub, 32))
        gen_feats = _chunked(probe.features, gen_imgs)
        fd = frechet_distance(real_feats, gen_feats)
        kd = kernel_distance(real_feats, gen_feats)
        rows.append({"name": name, "micro_f1": micro, "macro_f1": macro,
                     "fd": fd, "kd": kd})

    lines = ["name\tmicro_f1\tmacro_f1\tfd\tkd",
             f"baseline\t{baseline_f1[0]}\t{baseline_f1[1]}\t\t"]
    for row in rows:
        lines.append(f"{row['name']}\t{row['micro_f1']}\t{row['macro_f1']}"
                     f"\t{row['fd']}\t{row['kd']}")
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows
