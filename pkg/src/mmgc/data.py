"""Synthetic paired image/report data with per-modality ambiguity.

Each sample is informative in both modalities, or ambiguous in exactly one
of them. An ambiguous rendering is drawn from the same distribution for both
classes, so the best achievable accuracy of each single modality (and of the
pair) has a closed form; see ``bayes_accuracy``.

On disk a dataset directory holds ``manifest.jsonl``, ``split.jsonl``,
``vocab.txt`` and one ``images/<id>.mmgi`` file per sample.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIOError, FormatError, InvalidParams, TooFewSamples
from .report_encoder import Vocabulary, build_vocab, tokenize

VCD, GC = 0, 1
CLASS_NAMES = ("VCD", "GC")
AMBIGUITY = ("none", "image", "text")

IMAGE_MAGIC = b"MMGI"
_IMAGE_HEADER = struct.Struct("<4sIII")

# reference geometry for a 32x32 image; scaled linearly for other sizes
_RADIUS = {VCD: 5.0, GC: 9.0, "ambiguous": 7.0}
_INTENSITY = {VCD: 0.5, GC: 0.9, "ambiguous": 0.7}

REPORT_TEMPLATES = {
    VCD: "smooth white leukoplakia patch on vocal cord",
    GC: "irregular ulcerated exophytic mass on vocal cord",
}
NEUTRAL_REPORT = "lesion on vocal cord observed"
FILLERS = (
    "left", "right", "bilateral", "anterior", "posterior", "mild", "noted",
    "mucosa", "commissure", "visible", "region", "examination",
)


@dataclass(frozen=True)
class GenParams:
    n_samples: int = 2000
    prior_gc: float = 0.5
    a_img: float = 0.3
    a_txt: float = 0.3
    sigma: float = 0.05
    seed: int = 0
    image_size: int = 32
    channels: int = 1

    def validate(self) -> "GenParams":
        if self.n_samples < 0:
            raise InvalidParams("n_samples must be non-negative")
        for name in ("prior_gc", "a_img", "a_txt"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParams(f"{name} must lie in [0, 1], got {value}")
        if self.a_img + self.a_txt > 1.0 + 1e-12:
            raise InvalidParams("a_img + a_txt must not exceed 1 (ambiguity sets are disjoint)")
        if self.sigma < 0:
            raise InvalidParams("sigma must be non-negative")
        if self.image_size < 4 or self.channels < 1:
            raise InvalidParams("image_size must be >= 4 and channels >= 1")
        return self


@dataclass(eq=False)
class PairedSample:
    id: str
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    report: str
    label: int
    ambiguous: str = "none"

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairedSample):
            return NotImplemented
        return (
            (self.id, self.report, self.label, self.ambiguous)
            == (other.id, other.report, other.label, other.ambiguous)
            and self.image.dtype == other.image.dtype
            and self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
        )


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def part(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)


def _sample_streams(seed: int, index: int) -> list[np.random.Generator]:
    """Independent generators for (label/bucket, image, report) of one sample."""
    children = np.random.SeedSequence([seed, index]).spawn(3)
    return [np.random.default_rng(c) for c in children]


def render_image(params: GenParams, index: int, label: int, ambiguous: bool) -> np.ndarray:
    """Centered disk on a textured background plus Gaussian pixel noise, clamped to [0, 1].

    For ambiguous renderings the output does not depend on ``label``.
    """
    _, rng, _ = _sample_streams(params.seed, index)
    key = "ambiguous" if ambiguous else label
    size = params.image_size
    radius = _RADIUS[key] * size / 32.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    freq = rng.uniform(0.2, 0.8, size=2)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
    background = 0.2 + 0.05 * np.sin(freq[0] * xx + phase[0]) * np.cos(freq[1] * yy + phase[1])
    center = (size - 1) / 2.0
    disk = (xx - center) ** 2 + (yy - center) ** 2 <= radius**2
    clean = np.where(disk, _INTENSITY[key], background)
    noise = rng.standard_normal((params.channels, size, size)) * params.sigma
    return np.clip(clean[None] + noise, 0.0, 1.0).astype(np.float32)


def render_report(params: GenParams, index: int, label: int, ambiguous: bool) -> str:
    """Class template (or the shared neutral template) with 1-2 filler words inserted."""
    _, _, rng = _sample_streams(params.seed, index)
    words = (NEUTRAL_REPORT if ambiguous else REPORT_TEMPLATES[label]).split()
    for _ in range(int(rng.integers(1, 3))):
        words.insert(int(rng.integers(0, len(words) + 1)), FILLERS[int(rng.integers(len(FILLERS)))])
    return " ".join(words)


def make_sample(params: GenParams, index: int) -> PairedSample:
    meta, _, _ = _sample_streams(params.seed, index)
    label = GC if meta.random() < params.prior_gc else VCD
    u = meta.random()
    if u < params.a_img:
        ambiguous = "image"
    elif u < params.a_img + params.a_txt:
        ambiguous = "text"
    else:
        ambiguous = "none"
    return PairedSample(
        id=f"s{index:06d}",
        image=render_image(params, index, label, ambiguous == "image"),
        report=render_report(params, index, label, ambiguous == "text"),
        label=label,
        ambiguous=ambiguous,
    )


def generate(params: GenParams) -> list[PairedSample]:
    params.validate()
    return [make_sample(params, i) for i in range(params.n_samples)]


def bayes_accuracy(params: GenParams, modality: str) -> float:
    """Closed-form optimal accuracy using only ``modality`` (image, text or fused).

    Informative renderings are separable, so they are classified perfectly;
    on an ambiguous one the best guess is the majority class.
    """
    params.validate()
    if params.sigma > 0.1:
        raise InvalidParams("bayes_accuracy assumes separable renderings (sigma <= 0.1)")
    majority = max(params.prior_gc, 1.0 - params.prior_gc)
    uninformative = {"image": params.a_img, "text": params.a_txt, "fused": 0.0}
    if modality not in uninformative:
        raise InvalidParams(f"modality must be image, text or fused, got {modality!r}")
    frac = uninformative[modality]
    return (1.0 - frac) + frac * majority


def split(ids: list[str], seed: int, ratios: tuple[int, int, int] = (8, 1, 1),
          strata: list | None = None) -> DatasetSplit:
    """Seeded shuffle; train = floor(n*8/10), val = floor(n/10), test = the rest.

    With ``strata`` (one hashable key per id) the shuffled ids are grouped by
    stratum and parts are dealt out proportionally along that order, so every
    part mirrors the stratum mix while keeping the same part sizes.
    """
    n = len(ids)
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {n}")
    total = sum(ratios)
    sizes = [n * ratios[0] // total, n * ratios[1] // total]
    sizes.append(n - sum(sizes))
    rng = np.random.default_rng(seed)
    if strata is None:
        order = rng.permutation(n)
        bounds = np.cumsum(sizes)[:-1]
        parts = np.split(order, bounds)
    else:
        if len(strata) != n:
            raise ValueError("strata must have one entry per id")
        codes = {key: i for i, key in enumerate(sorted(set(strata), key=repr))}
        keys = rng.random(n)
        order = np.lexsort((keys, [codes[k] for k in strata]))
        parts = [[], [], []]
        counts = np.zeros(3)
        target = np.array(sizes, dtype=np.float64)
        for k, idx in enumerate(order):
            # give the slot to the part lagging furthest behind its quota
            deficit = (k + 1) * target / n - counts
            deficit[counts >= target] = -np.inf
            p = int(np.argmax(deficit))
            parts[p].append(idx)
            counts[p] += 1
        # list each part in shuffled order, not grouped by stratum
        parts = [sorted(part, key=lambda i: keys[i]) for part in parts]
    train, val, test = ([ids[i] for i in part] for part in parts)
    return DatasetSplit(train=train, val=val, test=test)


def split_strata(samples: list[PairedSample]) -> list[tuple[int, str]]:
    return [(s.label, s.ambiguous) for s in samples]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_image(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    c, h, w = image.shape
    path.write_bytes(_IMAGE_HEADER.pack(IMAGE_MAGIC, c, h, w) + image.tobytes(order="C"))


def read_image(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < _IMAGE_HEADER.size:
        raise FormatError(f"{path}: truncated image header")
    magic, c, h, w = _IMAGE_HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad image magic {magic!r}")
    expected = _IMAGE_HEADER.size + 4 * c * h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_IMAGE_HEADER.size)
    return data.reshape(c, h, w).astype(np.float32)


def _dump_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")


def _load_jsonl(path: Path) -> list[dict]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(record, dict):
            raise FormatError(f"{path}:{lineno}: expected a JSON object")
        records.append(record)
    return records


def save_dataset(samples: list[PairedSample], split_: DatasetSplit, directory: str | Path,
                 vocab: Vocabulary | None = None) -> None:
    root = Path(directory)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        manifest = []
        for s in samples:
            rel = f"images/{s.id}.mmgi"
            write_image(root / rel, s.image)
            manifest.append({"id": s.id, "label": s.label, "report": s.report, "image": rel,
                             "ambiguous": s.ambiguous})
        _dump_jsonl(root / "manifest.jsonl", manifest)
        _dump_jsonl(
            root / "split.jsonl",
            [{"id": i, "split": part} for part in ("train", "val", "test") for i in split_.part(part)],
        )
        if vocab is not None:
            vocab.save(root / "vocab.txt")
    except OSError as exc:
        raise DataIOError(f"cannot write dataset to {root}: {exc}") from exc


def load_dataset(directory: str | Path) -> tuple[list[PairedSample], DatasetSplit]:
    root = Path(directory)
    samples = []
    for rec in _load_jsonl(root / "manifest.jsonl"):
        try:
            sid, label, report, rel, amb = rec["id"], rec["label"], rec["report"], rec["image"], rec["ambiguous"]
        except KeyError as exc:
            raise FormatError(f"manifest record missing field {exc}") from None
        if label not in (VCD, GC) or amb not in AMBIGUITY:
            raise FormatError(f"sample {sid}: invalid label or ambiguity flag")
        path = root / rel
        try:
            image = read_image(path)
        except OSError as exc:
            raise DataIOError(f"sample {sid}: cannot read image {path}: {exc}") from exc
        except FormatError as exc:
            raise FormatError(f"sample {sid}: {exc}") from None
        samples.append(PairedSample(sid, image, report, label, amb))
    known = {s.id for s in samples}
    parts = DatasetSplit()
    for rec in _load_jsonl(root / "split.jsonl"):
        sid, part = rec.get("id"), rec.get("split")
        if sid not in known or part not in ("train", "val", "test"):
            raise FormatError(f"bad split record {rec}")
        parts.part(part).append(sid)
    return samples, parts


def load_vocab(directory: str | Path, samples: list[PairedSample] | None = None) -> Vocabulary:
    path = Path(directory) / "vocab.txt"
    if path.exists() or samples is None:
        return Vocabulary.load(path)
    return build_vocab([s.report for s in samples])


@dataclass
class DatasetArrays:
    """Dense batches-ready view of a list of samples."""

    ids: list[str]
    images: np.ndarray  # (N, C, H, W)
    tokens: np.ndarray  # (N, L)
    lengths: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index) -> "DatasetArrays":
        index = np.asarray(index, dtype=np.int64)
        return DatasetArrays([self.ids[i] for i in index], self.images[index], self.tokens[index],
                             self.lengths[index], self.labels[index])


def to_arrays(samples: list[PairedSample], vocab: Vocabulary, max_len: int) -> DatasetArrays:
    seqs = [tokenize(vocab, s.report, max_len) for s in samples]
    return DatasetArrays(
        ids=[s.id for s in samples],
        images=np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, 1, 1), np.float32),
        tokens=np.stack([q.ids for q in seqs]) if seqs else np.zeros((0, max_len), np.int64),
        lengths=np.array([q.length for q in seqs], dtype=np.int64),
        labels=np.array([s.label for s in samples], dtype=np.int64),
    )


def select(samples: list[PairedSample], ids: list[str]) -> list[PairedSample]:
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in ids]
