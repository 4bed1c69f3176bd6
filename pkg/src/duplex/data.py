"""Synthetic paired image/report corpus.

Scenes are built from six procedural findings, each confined to a known
region of the frame. Reports are templated sentences over a small closed
vocabulary, so ground-truth labels can be recovered from text exactly.
A noise injector produces the "raw" variant of each report; the cleaner
inverts it deterministically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re

import numpy as np

from .imageio import read_image, write_image

FINDINGS = ("leftblob", "rightblob", "ring", "bar", "gradient", "speckle")
SEVERITIES = ("mild", "moderate", "severe")
LOCATIONS = ("upper", "lower", "left", "right")
NUM_FINDINGS = len(FINDINGS)

FINDING_PROB = 0.3
HEDGE_PROB = 0.05
TEST_FRACTION = 0.05

_SEV_GAIN = {"mild": 0.45, "moderate": 0.7, "severe": 1.0}

# Locations each finding may occupy. Blobs sit on a fixed x column so only
# the vertical placement varies; the rest use all four placements.
LOCATIONS_FOR = {
    "leftblob": ("upper", "lower"),
    "rightblob": ("upper", "lower"),
    "ring": LOCATIONS,
    "bar": LOCATIONS,
    "gradient": LOCATIONS,
    "speckle": LOCATIONS,
}

_HEDGE_WORDS = ("possible", "probable")
_NEGATION_WORDS = ("no", "without")

_FILLERS = (
    "FINAL REPORT",
    "as compared to prior study",
    "clinical correlation recommended",
    "please refer to the addendum",
    "patient positioning was adequate",
    "image quality is acceptable",
)


@dataclasses.dataclass
class SceneSpec:
    """Full description of one scene: what is present, where, how strong."""

    present: tuple
    severity: tuple    # entry is None for absent findings
    location: tuple    # entry is None for absent findings
    hedged: int | None  # index of an absent finding mentioned as "possible"
    noise_seed: int

    def __post_init__(self):
        if len(self.present) != NUM_FINDINGS:
            raise ValueError("present must cover every finding")
        for k in range(NUM_FINDINGS):
            if self.present[k]:
                if self.severity[k] not in SEVERITIES:
                    raise ValueError(f"bad severity for {FINDINGS[k]}: {self.severity[k]}")
                if self.location[k] not in LOCATIONS_FOR[FINDINGS[k]]:
                    raise ValueError(f"bad location for {FINDINGS[k]}: {self.location[k]}")
        if self.hedged is not None and self.present[self.hedged]:
            raise ValueError("hedged finding must be absent")

    def labels(self) -> np.ndarray:
        return np.array([1 if p else 0 for p in self.present], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "SceneSpec":
        d = json.loads(line)
        return SceneSpec(
            present=tuple(d["present"]),
            severity=tuple(d["severity"]),
            location=tuple(d["location"]),
            hedged=d["hedged"],
            noise_seed=d["noise_seed"],
        )


def _grid(resolution: int):
    # Pixel centers in normalized [0, 1] coordinates; y runs downward.
    c = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    return np.meshgrid(c, c, indexing="ij")  # y, x


def _anchor(location: str):
    return {
        "upper": (0.27, 0.5),
        "lower": (0.73, 0.5),
        "left": (0.5, 0.27),
        "right": (0.5, 0.73),
    }[location]


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _box_window(y, x, y0, y1, x0, x1, edge=0.02):
    # Smooth indicator of an axis-aligned box, exactly zero outside it.
    wy = _smoothstep((y - y0) / edge) * _smoothstep((y1 - y) / edge)
    wx = _smoothstep((x - x0) / edge) * _smoothstep((x1 - x) / edge)
    return wy * wx


def _finding_field(k: int, location: str, gain: float, resolution: int) -> np.ndarray:
    """Intensity contribution of one finding. Zero outside its region."""
    y, x = _grid(resolution)
    name = FINDINGS[k]
    if name == "leftblob" or name == "rightblob":
        cx = 0.26 if name == "leftblob" else 0.74
        cy = 0.3 if location == "upper" else 0.7
        r2 = ((y - cy) ** 2 + (x - cx) ** 2) / (0.09 ** 2)
        field = np.exp(-0.5 * r2)
        field = field * _smoothstep((9.0 - r2) / 2.0)  # hard zero past 3 sigma
        return 0.55 * gain * field
    if name == "ring":
        cy, cx = _anchor(location)
        r = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
        band = np.exp(-0.5 * ((r - 0.13) / 0.035) ** 2)
        band = band * _smoothstep((0.24 - r) / 0.02) * _smoothstep((r - 0.02) / 0.02)
        return 0.6 * gain * band
    if name == "bar":
        if location == "upper":
            win = _box_window(y, x, 0.06, 0.17, 0.2, 0.8)
        elif location == "lower":
            win = _box_window(y, x, 0.83, 0.94, 0.2, 0.8)
        elif location == "left":
            win = _box_window(y, x, 0.2, 0.8, 0.06, 0.17)
        else:
            win = _box_window(y, x, 0.2, 0.8, 0.83, 0.94)
        return 0.5 * gain * win
    if name == "gradient":
        cy, cx = _anchor(location)
        y0, y1 = cy - 0.16, cy + 0.16
        x0, x1 = cx - 0.16, cx + 0.16
        win = _box_window(y, x, y0, y1, x0, x1)
        ramp = (x - x0) / (x1 - x0) if location in ("upper", "lower") else (y - y0) / (y1 - y0)
        return 0.5 * gain * win * np.clip(ramp, 0.0, 1.0)
    if name == "speckle":
        cy, cx = _anchor(location)
        win = _box_window(y, x, cy - 0.17, cy + 0.17, cx - 0.17, cx + 0.17)
        pattern = 0.5 * (1.0 + np.sin(2 * np.pi * 5.0 * y) * np.sin(2 * np.pi * 5.0 * x))
        return 0.45 * gain * win * pattern
    raise KeyError(name)


def finding_region(k: int, location: str, resolution: int) -> np.ndarray:
    """Boolean mask of pixels the finding is allowed to touch."""
    return _finding_field(k, location, 1.0, resolution) > 0.0


def render(spec: SceneSpec, resolution: int = 32, noise_level: float = 0.02) -> np.ndarray:
    """Render a scene to a [R, R, 1] float image in [0, 1]."""
    if resolution < 16:
        raise ValueError(f"resolution too small to resolve findings: {resolution}")
    y, x = _grid(resolution)
    img = 0.15 + 0.1 * (1.0 - ((y - 0.5) ** 2 + (x - 0.5) ** 2) / 0.5)
    for k in range(NUM_FINDINGS):
        if spec.present[k]:
            img = img + _finding_field(k, spec.location[k], _SEV_GAIN[spec.severity[k]], resolution)
    if noise_level > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.noise_seed)))
        # Noise is sampled on a fixed 64x64 lattice and resampled to the
        # target resolution so the same seed gives the "same" noise at any
        # render size.
        base = rng.standard_normal((64, 64))
        if resolution == 64:
            noise = base
        else:
            idx = (np.arange(resolution) * 64) // resolution
            noise = base[np.ix_(idx, idx)]
        img = img + noise_level * noise
    return np.clip(img, 0.0, 1.0)[:, :, None]


# ---------------------------------------------------------------------------
# reports


_MARGIN_FOR = {"mild": "smooth", "moderate": "indistinct", "severe": "irregular"}


def render_report(spec: SceneSpec) -> str:
    """Templated clean report; invertible by extract_labels."""
    parts = []
    for k in range(NUM_FINDINGS):
        if spec.present[k]:
            sev = spec.severity[k]
            parts.append(f"{sev} {FINDINGS[k]} in {spec.location[k]} region "
                         f"with {_MARGIN_FOR[sev]} margins .")
        elif spec.hedged == k:
            parts.append(f"possible {FINDINGS[k]} .")
    if not parts:
        parts.append("no acute findings . the remainder is unremarkable .")
    return " ".join(parts)


def report_vocabulary() -> list:
    """Every word a clean report can contain, plus the findings glossary."""
    words = set()
    words.update(FINDINGS)
    words.update(SEVERITIES)
    words.update(LOCATIONS)
    words.update(_MARGIN_FOR.values())
    words.update(["in", "region", ".", "possible", "no", "acute", "findings",
                  "with", "margins", "the", "remainder", "is", "unremarkable"])
    return sorted(words)


def noisy_report(clean: str, rng: np.random.Generator) -> str:
    """Inject transcription artifacts: underscore runs, bracketed inline
    metadata, header boilerplate, and filler phrases."""
    sentences = [s.strip() + " ." for s in clean.split(" .") if s.strip()]
    out = []
    if rng.random() < 0.7:
        out.append("_" * int(rng.integers(2, 7)))
        out.append("FINAL REPORT")
    if rng.random() < 0.8:
        out.append(f"[ exam {int(rng.integers(1000, 9999))} kv {int(rng.integers(60, 120))} ]")
    for s in sentences:
        out.append(s)
        if rng.random() < 0.4:
            out.append(_FILLERS[1 + int(rng.integers(0, len(_FILLERS) - 1))])
        if rng.random() < 0.2:
            out.append("_" * int(rng.integers(2, 5)))
    if rng.random() < 0.3:
        out.append(f"[ series {int(rng.integers(1, 9))} ]")
    return " ".join(out)


_BRACKET_RE = re.compile(r"\[[^\[\]]*\]")
_UNDERSCORE_RE = re.compile(r"(?<!\S)_+(?!\S)")
_SPACE_RE = re.compile(r"\s+")


def clean_report(raw: str) -> str:
    """Deterministic inverse of the noise injector. Idempotent."""
    text = _BRACKET_RE.sub(" ", raw)
    text = _UNDERSCORE_RE.sub(" ", text)
    for phrase in _FILLERS:
        text = text.replace(phrase, " ")
    return _SPACE_RE.sub(" ", text).strip()


def extract_labels(text: str, uncertain_positive: bool = False) -> np.ndarray:
    """Recover the finding vector from report text.

    A finding counts as present when named in a sentence without negation.
    Hedged mentions ("possible ring") are negative by default; pass
    uncertain_positive=True to count them as positive instead.
    """
    labels = np.zeros(NUM_FINDINGS, dtype=np.int64)
    for sentence in text.split("."):
        words = sentence.split()
        if not words:
            continue
        hedged = any(w in _HEDGE_WORDS for w in words)
        negated = any(w in _NEGATION_WORDS for w in words)
        for k, name in enumerate(FINDINGS):
            if name in words:
                if negated:
                    continue
                labels[k] = 1 if (not hedged or uncertain_positive) else labels[k]
    return labels


# ---------------------------------------------------------------------------
# corpus


@dataclasses.dataclass
class Sample:
    spec: SceneSpec
    image: np.ndarray
    report: str        # clean
    raw_report: str    # with injected noise
    labels: np.ndarray
    is_test: bool


def _sample_spec(rng: np.random.Generator, noise_seed: int) -> SceneSpec:
    present = tuple(bool(v) for v in rng.random(NUM_FINDINGS) < FINDING_PROB)
    severity = []
    location = []
    for k in range(NUM_FINDINGS):
        if present[k]:
            severity.append(SEVERITIES[int(rng.integers(0, len(SEVERITIES)))])
            locs = LOCATIONS_FOR[FINDINGS[k]]
            location.append(locs[int(rng.integers(0, len(locs)))])
        else:
            severity.append(None)
            location.append(None)
    hedged = None
    if rng.random() < HEDGE_PROB:
        absent = [k for k in range(NUM_FINDINGS) if not present[k]]
        if absent:
            hedged = absent[int(rng.integers(0, len(absent)))]
    return SceneSpec(tuple(present), tuple(severity), tuple(location), hedged, noise_seed)


def gen_corpus(n: int, seed: int, resolution: int = 32) -> list:
    """Generate n paired samples. Fully determined by (n, seed, resolution).

    Each sample draws from its own substreams keyed on (seed, index), so
    sample i is identical no matter what n is.
    """
    if n <= 0:
        raise ValueError(f"corpus size must be positive: {n}")
    samples = []
    for i in range(n):
        scene_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i, 0])))
        noise_seed = int(np.random.SeedSequence([seed, i, 1]).generate_state(1)[0])
        text_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i, 2])))
        split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i, 3])))
        spec = _sample_spec(scene_rng, noise_seed)
        report = render_report(spec)
        samples.append(Sample(
            spec=spec,
            image=render(spec, resolution),
            report=report,
            raw_report=noisy_report(report, text_rng),
            labels=spec.labels(),
            is_test=bool(split_rng.random() < TEST_FRACTION),
        ))
    return samples


def train_test_split(samples):
    train = [s for s in samples if not s.is_test]
    test = [s for s in samples if s.is_test]
    return train, test


def corpus_hash(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.spec.to_json().encode())
        h.update(s.report.encode())
        h.update(s.raw_report.encode())
        h.update(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        h.update(b"test" if s.is_test else b"train")
    return h.hexdigest()


def save_corpus(samples, root, seed: int | None = None) -> None:
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    resolution = samples[0].image.shape[0]
    with open(os.path.join(root, "scenes.txt"), "w") as fh:
        for s in samples:
            fh.write(s.spec.to_json() + "\n")
    with open(os.path.join(root, "reports_clean.txt"), "w") as fh:
        for s in samples:
            fh.write(s.report + "\n")
    with open(os.path.join(root, "reports_raw.txt"), "w") as fh:
        for s in samples:
            fh.write(s.raw_report + "\n")
    with open(os.path.join(root, "labels.txt"), "w") as fh:
        for s in samples:
            fh.write(" ".join(str(int(v)) for v in s.labels) + "\n")
    with open(os.path.join(root, "split.txt"), "w") as fh:
        for s in samples:
            fh.write(("test" if s.is_test else "train") + "\n")
    for i, s in enumerate(samples):
        write_image(os.path.join(root, "images", f"{i:05d}.fimg"), s.image)
    lines = [
        f"count = {len(samples)}",
        f"findings = {','.join(FINDINGS)}",
        f"hash = {corpus_hash(samples)}",
        f"resolution = {resolution}",
        f"seed = {'unknown' if seed is None else seed}",
    ]
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corpus(root) -> list:
    with open(os.path.join(root, "manifest.txt")) as fh:
        meta = dict(line.strip().split(" = ", 1) for line in fh if line.strip())
    n = int(meta["count"])
    specs = [SceneSpec.from_json(l) for l in open(os.path.join(root, "scenes.txt"))]
    reports = [l.rstrip("\n") for l in open(os.path.join(root, "reports_clean.txt"))]
    raws = [l.rstrip("\n") for l in open(os.path.join(root, "reports_raw.txt"))]
    splits = [l.strip() for l in open(os.path.join(root, "split.txt"))]
    labels = np.loadtxt(os.path.join(root, "labels.txt"), dtype=np.int64, ndmin=2)
    if not (len(specs) == len(reports) == len(raws) == len(splits) == len(labels) == n):
        raise ValueError(f"corpus at {root} is inconsistent with its manifest")
    samples = []
    for i in range(n):
        samples.append(Sample(
            spec=specs[i],
            image=read_image(os.path.join(root, "images", f"{i:05d}.fimg")),
            report=reports[i],
            raw_report=raws[i],
            labels=labels[i],
            is_test=splits[i] == "test",
        ))
    if meta["hash"] != corpus_hash(samples):
        raise ValueError(f"corpus at {root} fails its manifest hash")
    return samples
