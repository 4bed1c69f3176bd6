"""End-to-end checks of the six command line entry points."""

import numpy as np
import pytest

from duplex import checkpoint as ckpt_io
from duplex.cli import build_parser, main
from duplex.codec import pretrain_codec
from duplex.data import load_corpus, train_test_split
from duplex.imageio import read_image, write_image
from duplex.metrics import MetricReport, ProbeConfig, save_probe, train_probe
from duplex.model import ModelBundle
from duplex.params import GENERATION, UNDERSTANDING
from duplex.pipeline import StageConfig


def _cfg_file(path, cfg):
    path.write_text(cfg.to_text())
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus, init checkpoint, and tiny stage-1/2 runs driven via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    corpus_dir = root / "corpus"
    assert main(["datagen", "--n", "200", "--seed", "5", "--res", "32",
                 "--out", str(corpus_dir)]) == 0

    init = root / "init.ckpt"
    ModelBundle.build(seed=3).save(str(init))
    run = root / "run"

    cfg1 = StageConfig(stage=1, learning_rate=1e-4, warmup_steps=1,
                       total_steps=2, resolution=32, use_repa=False,
                       repa_weight=0.0, batch_size=4, freeze=(GENERATION,),
                       mixing_ratio=(1, 0), scale=1)
    assert main(["train", "--stage", "1",
                 "--config", _cfg_file(root / "stage1.cfg", cfg1),
                 "--resume", str(init), "--corpus", str(corpus_dir),
                 "--out", str(run), "--seed", "3"]) == 0

    # codec and probe live next to the stage checkpoints so the sibling
    # lookup in train/generate/evaluate resolves without flags
    samples = load_corpus(str(corpus_dir))
    images = np.stack([s.image for s in samples[:64]])
    labels = np.stack([s.labels for s in samples[:64]])
    codec = pretrain_codec(images, seed=1, steps=3)
    ckpt_io.save(str(run / "codec.ckpt"), codec.tree)
    probe = train_probe(images, labels, seed=2, steps=3,
                        cfg=ProbeConfig(d_p=2, width=4))
    save_probe(str(run / "probe.ckpt"), probe)

    # repa stays off here: the tiny d_p=2 probe cannot pair with the full
    # model's alignment head, and the repa path is covered by pipeline tests
    cfg2 = StageConfig(stage=2, learning_rate=2e-4, warmup_steps=1,
                       total_steps=2, resolution=32, use_repa=False,
                       repa_weight=0.0, batch_size=4, freeze=(UNDERSTANDING,),
                       mixing_ratio=(0, 1), scale=1)
    assert main(["train", "--stage", "2",
                 "--config", _cfg_file(root / "stage2.cfg", cfg2),
                 "--resume", str(run / "stage1.ckpt"), "--corpus", str(corpus_dir),
                 "--out", str(run), "--seed", "3"]) == 0
    return root


def test_help_lists_all_subcommands():
    text = build_parser().format_help()
    for name in ("datagen", "train", "ablate", "understand", "generate", "evaluate"):
        assert name in text


def test_datagen_corpus_loads_back(workdir):
    samples = load_corpus(str(workdir / "corpus"))
    assert len(samples) == 200
    assert samples[0].image.shape == (32, 32, 1)
    train, test = train_test_split(samples)
    assert len(test) >= 4  # evaluate/ablate below need a usable test split


def test_train_writes_stage_artifacts(workdir):
    run = workdir / "run"
    for name in ("stage1.ckpt", "stage1.manifest.txt", "stage1.losses.txt",
                 "stage2.ckpt", "stage2.manifest.txt"):
        assert (run / name).exists(), name


def test_train_rejects_config_stage_mismatch(workdir):
    with pytest.raises(SystemExit):
        main(["train", "--stage", "2",
              "--config", str(workdir / "stage1.cfg"),
              "--resume", str(workdir / "init.ckpt"),
              "--corpus", str(workdir / "corpus"),
              "--out", str(workdir / "mismatch")])


def test_understand_prints_text(workdir, capsys):
    samples = load_corpus(str(workdir / "corpus"))
    img_path = workdir / "query.fimg"
    write_image(str(img_path), samples[0].image)
    assert main(["understand", "--checkpoint", str(workdir / "run" / "stage1.ckpt"),
                 "--image", str(img_path)]) == 0
    out = capsys.readouterr().out
    assert out.endswith("\n")


def test_generate_writes_image_and_sidecar(workdir):
    run = workdir / "run"
    out = workdir / "gen.fimg"
    assert main(["generate", "--checkpoint", str(run / "stage2.ckpt"),
                 "--report", "possible ring .", "--steps", "2", "--seed", "9",
                 "--res", "32", "--out", str(out)]) == 0
    img = read_image(str(out))
    assert img.shape == (32, 32, 1)
    assert np.isfinite(img).all()
    sidecar = (workdir / "gen.fimg.txt").read_text()
    for key in ("report = possible ring .", "seed = 9", "steps = 2",
                "resolution = 32"):
        assert key in sidecar


def test_generate_same_seed_same_bytes(workdir):
    run = workdir / "run"
    paths = [workdir / f"det{i}.fimg" for i in range(3)]
    for p, seed in zip(paths, (4, 4, 5)):
        assert main(["generate", "--checkpoint", str(run / "stage2.ckpt"),
                     "--report", "possible bar .", "--steps", "2",
                     "--seed", str(seed), "--out", str(p)]) == 0
    a, b, c = (p.read_bytes() for p in paths)
    assert a == b
    assert a != c


def test_generate_double_resolution(workdir):
    run = workdir / "run"
    out = workdir / "gen64.fimg"
    assert main(["generate", "--checkpoint", str(run / "stage2.ckpt"),
                 "--report", "no acute findings .", "--steps", "2", "--res", "64",
                 "--out", str(out)]) == 0
    assert read_image(str(out)).shape == (64, 64, 1)


def test_evaluate_writes_metric_report(workdir):
    out = workdir / "report.txt"
    assert main(["evaluate", "--checkpoint", str(workdir / "run" / "stage2.ckpt"),
                 "--corpus", str(workdir / "corpus"),
                 "--out", str(out), "--steps", "2"]) == 0
    entries = MetricReport.parse(out.read_text())
    for key in ("micro_f1_neg", "macro_f1_neg", "fd", "kd", "alignment"):
        assert np.isfinite(entries[key]), key
    assert entries["sampler_steps"] == 2


def test_ablate_custom_grid(workdir):
    grid = workdir / "grid.txt"
    grid.write_text("# name freeze mix\nonly_frozen understanding 0:1\n")
    out = workdir / "ablation.tsv"
    assert main(["ablate", "--grid", str(grid),
                 "--run", str(workdir / "run"),
                 "--corpus", str(workdir / "corpus"),
                 "--out", str(out), "--steps", "2"]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].split("\t") == ["name", "micro_f1", "macro_f1", "fd", "kd"]
    assert lines[1].startswith("baseline\t")
    assert lines[2].startswith("only_frozen\t")
    fd = float(lines[2].split("\t")[3])
    assert np.isfinite(fd) and fd >= 0.0


def test_ablate_missing_run_dir(workdir, tmp_path):
    with pytest.raises(FileNotFoundError):
        main(["ablate", "--run", str(tmp_path),
              "--corpus", str(workdir / "corpus"),
              "--out", str(tmp_path / "x.tsv")])
