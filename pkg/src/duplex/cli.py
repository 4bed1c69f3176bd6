"""Command-line entry points.

Subcommands: datagen, train, ablate, understand, generate, evaluate.
Checkpoints are the binary container from duplex.checkpoint; images use
the float-image format from duplex.imageio; configs, manifests and metric
reports are flat key-value text.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from .codec import LatentCodec
from .data import gen_corpus, load_corpus, save_corpus
from .generation import euler_sample
from .imageio import read_image, write_image
from .metrics import evaluate, load_probe
from .model import ModelBundle
from .pipeline import StageConfig, run_ablation, run_stage
from .tensor import Tensor, no_grad
from .understanding import BOS


def _load_codec(path) -> LatentCodec:
    codec = LatentCodec()
    codec.tree.load_values(ckpt_io.load(path).params)
    return codec


def _sibling(ckpt_path, name: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), name)


def cmd_datagen(args) -> int:
    samples = gen_corpus(args.n, args.seed, args.res)
    save_corpus(samples, args.out, seed=args.seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    with open(args.config) as fh:
        cfg = StageConfig.from_text(fh.read())
    if cfg.stage != args.stage:
        raise SystemExit(f"--stage {args.stage} but config file says stage {cfg.stage}")
    samples = load_corpus(args.corpus)
    bundle = ModelBundle.from_checkpoint(args.resume, seed=args.seed)
    codec = probe = None
    if cfg.stage >= 2:
        codec = _load_codec(args.codec or _sibling(args.resume, "codec.ckpt"))
        if cfg.use_repa:
            probe = load_probe(args.probe or _sibling(args.resume, "probe.ckpt"))
    manifest = run_stage(cfg, samples, bundle, args.out, args.seed,
                         codec=codec, probe=probe)
    print(f"stage {cfg.stage} done: final_loss = {manifest.entries['final_loss']}")
    return 0


def cmd_ablate(args) -> int:
    samples = load_corpus(args.corpus)
    grid = None
    if args.grid:
        grid = []
        with open(args.grid) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                name, freeze, mix = line.split()
                tags = tuple(t for t in freeze.split(",") if t != "none")
                r, s = mix.split(":")
                grid.append((name, tags, (int(r), int(s))))
    rows = run_ablation(samples, args.run, args.out, seed=args.seed,
                        steps=args.steps, **({"grid": tuple(grid)} if grid else {}))
    for row in rows:
        print(f"{row['name']}: micro_f1={row['micro_f1']:.4f} fd={row['fd']:.4f}")
    return 0


def cmd_understand(args) -> int:
    bundle = ModelBundle.from_checkpoint(args.checkpoint)
    image = read_image(args.image)
    prompt_ids = [BOS] + (bundle.vocab.encode(args.prompt) if args.prompt else [])
    ids = bundle.und.generate(Tensor(image), prompt_ids)
    print(bundle.vocab.decode(ids))
    return 0


def cmd_generate(args) -> int:
    bundle = ModelBundle.from_checkpoint(args.checkpoint)
    codec = _load_codec(args.codec or _sibling(args.checkpoint, "codec.ckpt"))
    rng = np.random.default_rng(args.seed)
    ids = bundle.vocab.encode(args.report)
    with no_grad():
        cond = bundle.und.encode_condition_batch(
            [ids], pad_to=max(bundle.cfg.gen.cond_len, len(ids) + 2))
    grid = args.res // codec.cfg.factor
    z = euler_sample(bundle.gen, cond, (grid, grid, codec.cfg.latent_channels),
                     args.steps, rng)
    image = codec.decode_denorm(z)[0]
    write_image(args.out, image)
    with open(args.out + ".txt", "w") as fh:
        fh.write(f"report = {args.report}\nseed = {args.seed}\n"
                 f"steps = {args.steps}\nresolution = {args.res}\n")
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    samples = load_corpus(args.corpus)
    bundle = ModelBundle.from_checkpoint(args.checkpoint)
    codec = _load_codec(args.codec or _sibling(args.checkpoint, "codec.ckpt"))
    probe = load_probe(args.probe or _sibling(args.checkpoint, "probe.ckpt"))
    report = evaluate(bundle, codec, probe, samples, seed=args.seed,
                      sampler_steps=args.steps, resolution=args.res,
                      out_path=args.out)
    print(report.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duplex",
                                description="dual-branch report/image model")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a synthetic paired corpus")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--res", type=int, default=32)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_datagen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--config", required=True, help="flat key-value StageConfig file")
    t.add_argument("--resume", required=True, help="checkpoint to start from")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--codec", default=None)
    t.add_argument("--probe", default=None)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("ablate", help="run the freeze/mixing ablation grid")
    a.add_argument("--grid", default=None,
                   help="optional grid file: 'name freeze-tags r:s' per line")
    a.add_argument("--run", required=True, help="directory with stage-2 artifacts")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int, default=150)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_ablate)

    u = sub.add_parser("understand", help="decode a report for an image")
    u.add_argument("--checkpoint", required=True)
    u.add_argument("--image", required=True)
    u.add_argument("--prompt", default="")
    u.set_defaults(fn=cmd_understand)

    g = sub.add_parser("generate", help="sample an image for a report")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--report", required=True)
    g.add_argument("--steps", type=int, default=25)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--res", type=int, default=32)
    g.add_argument("--out", required=True)
    g.add_argument("--codec", default=None)
    g.set_defaults(fn=cmd_generate)

    e = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=25)
    e.add_argument("--res", type=int, default=32)
    e.add_argument("--codec", default=None)
    e.add_argument("--probe", default=None)
    e.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
