"""Synthetic slides, the imbalance subsampler, bag samplers and dataset files.

A slide of class j holds ``ceil(w * n_s)`` witness instances drawn around the
class signature mean and background instances around a shared mean. Every
slide is generated from its own RNG stream keyed on (seed, split, class,
index), so growing a split never changes the slides already in it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ID, OOD = "ID", "OOD"
SPLIT_CODES = {"train": 0, "val": 1, "test": 2, "ood": 3}

MAGIC = b"SCMILDS\x00"
FILE_VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")


class DataError(ValueError):
    pass


@dataclass
class Slide:
    instances: np.ndarray
    label: int
    slide_id: str
    domain: str = ID

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 3
    slides_per_class: int = 96
    n_instances: int = 200
    witness_rate: float = 0.3
    d_in: int = 32
    separation: float = 3.0      # pairwise distance of signature means, in units of sigma
    sigma: float = 1.0
    bg_mean: float = 0.0
    bg_sigma: float = 1.0
    slide_sigma: float = 1.0     # per-slide offset shared by all its instances
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise DataError("n_classes must be >= 1")
        if self.slides_per_class < 0 or self.n_instances < 1 or self.d_in < 1:
            raise DataError("slide counts and sizes must be positive")
        if not 0.0 < self.witness_rate <= 1.0:
            raise DataError("witness_rate must lie in (0, 1]")
        if self.sigma <= 0 or self.bg_sigma <= 0 or self.slide_sigma < 0:
            raise DataError("scales must be positive")
        if self.separation <= 0 and self.n_classes > 1:
            raise DataError("separation must be positive so class means differ")
        if self.n_classes > self.d_in:
            raise DataError("need d_in >= n_classes for orthogonal class means")

    @property
    def n_witness(self) -> int:
        return math.ceil(round(self.witness_rate * self.n_instances, 9))


@dataclass(frozen=True)
class ImbalanceSpec:
    ratio: float = 1.0
    total: int = 288
    majority: int = 0


@dataclass(frozen=True)
class ShiftSpec:
    scale: float | tuple[float, ...] = 1.0
    offset: float | tuple[float, ...] = 0.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise DataError("shift scale must be strictly positive")
        if self.noise < 0:
            raise DataError("shift noise must be non-negative")


def class_means(spec: DatasetSpec) -> np.ndarray:
    """Signature means: random orthonormal directions, pairwise ``separation * sigma`` apart."""
    rng = np.random.default_rng([spec.seed, 99])
    q, _ = np.linalg.qr(rng.standard_normal((spec.d_in, spec.n_classes)))
    radius = spec.separation * spec.sigma / math.sqrt(2.0)
    return spec.bg_mean + radius * q.T


def _make_slide(spec: DatasetSpec, means: np.ndarray, split: str, label: int, index: int) -> Slide:
    rng = np.random.default_rng([spec.seed, SPLIT_CODES[split], label, index])
    n, k = spec.n_instances, spec.n_witness
    x = np.empty((n, spec.d_in))
    x[:k] = means[label] + spec.sigma * rng.standard_normal((k, spec.d_in))
    x[k:] = spec.bg_mean + spec.bg_sigma * rng.standard_normal((n - k, spec.d_in))
    if spec.slide_sigma > 0:
        x += spec.slide_sigma * rng.standard_normal(spec.d_in)
    x = x[rng.permutation(n)]
    return Slide(x, label, f"{split}-c{label}-{index:04d}", ID)


def generate_slides(spec: DatasetSpec, split: str = "train",
                    counts: Sequence[int] | None = None) -> list[Slide]:
    """Slides ordered by class then index. ``counts`` overrides ``slides_per_class``."""
    if split not in SPLIT_CODES:
        raise DataError(f"unknown split {split!r}")
    if counts is None:
        counts = [spec.slides_per_class] * spec.n_classes
    if len(counts) != spec.n_classes:
        raise DataError("need one count per class")
    means = class_means(spec)
    return [_make_slide(spec, means, split, j, i)
            for j in range(spec.n_classes) for i in range(counts[j])]


def class_counts(slides: Sequence[Slide], n_classes: int) -> np.ndarray:
    return np.bincount([s.label for s in slides], minlength=n_classes)


def imbalance_counts(imb: ImbalanceSpec, n_classes: int) -> list[int]:
    """Per-class training counts: every minority class gets ``m``, the majority ``rho * m``."""
    if imb.ratio < 1:
        raise DataError("imbalance ratio must be >= 1")
    if not 0 <= imb.majority < n_classes:
        raise DataError("majority class index out of range")
    m = round(imb.total / (imb.ratio + n_classes - 1))
    if m < 1:
        min_total = math.ceil(0.5 * (imb.ratio + n_classes - 1))
        raise DataError(f"total {imb.total} too small for ratio {imb.ratio} with "
                        f"{n_classes} classes; minimum feasible total is {min_total}")
    counts = [m] * n_classes
    counts[imb.majority] = round(imb.ratio * m)
    return counts


def subsample_imbalanced(slides: Sequence[Slide], imb: ImbalanceSpec, n_classes: int) -> list[Slide]:
    """Keep the first ``counts[j]`` slides of each class, preserving input order."""
    counts = imbalance_counts(imb, n_classes)
    have = class_counts(slides, n_classes)
    short = {j: int(counts[j] - have[j]) for j in range(n_classes) if have[j] < counts[j]}
    if short:
        detail = ", ".join(f"class {j}: need {counts[j]}, have {have[j]} (short {s})"
                           for j, s in short.items())
        raise DataError(f"insufficient slides: {detail}")
    taken = [0] * n_classes
    out = []
    for s in slides:
        if taken[s.label] < counts[s.label]:
            out.append(s)
            taken[s.label] += 1
    return out


def apply_ood_shift(slides: Sequence[Slide], shift: ShiftSpec) -> list[Slide]:
    """``x -> s * x + o + noise * eps``, tagging the results as OOD."""
    rng = np.random.default_rng(shift.seed)
    s = np.asarray(shift.scale, dtype=np.float64)
    o = np.asarray(shift.offset, dtype=np.float64)
    out = []
    for slide in slides:
        x = s * slide.instances + o
        if shift.noise > 0:
            x = x + shift.noise * rng.standard_normal(x.shape)
        out.append(Slide(x, slide.label, slide.slide_id, OOD))
    return out


# --------------------------------------------------------------------------
# samplers


def _check_bag_size(slides: Sequence[Slide], bag_size: int):
    if not slides:
        raise DataError("no slides to sample from")
    smallest = min(s.n_instances for s in slides)
    if bag_size < 1 or bag_size > smallest:
        raise DataError(f"bag_size {bag_size} not in [1, {smallest}]")


def _draw_bag(slide: Slide, bag_size: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(slide.n_instances, size=bag_size, replace=False)
    return slide.instances[idx]


def sample_batch_random(slides: Sequence[Slide], bag_size: int, batch_size: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform slide, then ``bag_size`` instances without replacement.

    Returns ``(bags, labels)`` with ``bags`` shaped ``(batch, bag_size, d_in)``.
    """
    _check_bag_size(slides, bag_size)
    picks = rng.integers(len(slides), size=batch_size)
    bags = np.stack([_draw_bag(slides[i], bag_size, rng) for i in picks])
    return bags, np.array([slides[i].label for i in picks], dtype=np.int64)


def sample_batch_class_balanced(slides: Sequence[Slide], bag_size: int, batch_size: int,
                                rng: np.random.Generator,
                                n_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Uniform class, then uniform slide within it, then instances as above."""
    _check_bag_size(slides, bag_size)
    if n_classes is None:
        n_classes = max(s.label for s in slides) + 1
    by_class = [[i for i, s in enumerate(slides) if s.label == j] for j in range(n_classes)]
    empty = [j for j, members in enumerate(by_class) if not members]
    if empty:
        raise DataError(f"classes without slides: {empty}")
    bags, labels = [], []
    for c in rng.integers(n_classes, size=batch_size):
        members = by_class[c]
        slide = slides[members[rng.integers(len(members))]]
        bags.append(_draw_bag(slide, bag_size, rng))
        labels.append(slide.label)
    return np.stack(bags), np.array(labels, dtype=np.int64)


def split_slide_into_bags(slide: Slide, bag_size: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffle then cut into consecutive chunks; a short final chunk is kept."""
    if bag_size < 1:
        raise DataError("bag_size must be >= 1")
    n = slide.n_instances
    if n == 0:
        raise DataError(f"slide {slide.slide_id} is empty")
    order = np.random.default_rng(seed).permutation(n)
    return [slide.instances[order[i:i + bag_size]] for i in range(0, n, bag_size)]


# --------------------------------------------------------------------------
# building the standard splits


@dataclass(frozen=True)
class SplitSizes:
    val_per_class: int = 10
    test_per_class: int = 30
    ood_per_class: int = 30


def build_splits(spec: DatasetSpec, imb: ImbalanceSpec, shift: ShiftSpec,
                 sizes: SplitSizes = SplitSizes()) -> dict[str, list[Slide]]:
    """Imbalanced train split plus balanced val/test ID splits and a shifted OOD split."""
    K = spec.n_classes
    counts = imbalance_counts(imb, K)
    pool = generate_slides(spec, "train", [max(counts)] * K)
    ood_raw = generate_slides(spec, "ood", [sizes.ood_per_class] * K)
    return {
        "train": subsample_imbalanced(pool, imb, K),
        "val": generate_slides(spec, "val", [sizes.val_per_class] * K),
        "test": generate_slides(spec, "test", [sizes.test_per_class] * K),
        "ood": apply_ood_shift(ood_raw, shift),
    }


# --------------------------------------------------------------------------
# files: manifest.json plus one <split>.bin per split


def write_split(path: str | Path, slides: Sequence[Slide]) -> None:
    if not slides:
        raise DataError("cannot write an empty split")
    n_s = slides[0].n_instances
    d_in = slides[0].instances.shape[1]
    if any(s.instances.shape != (n_s, d_in) for s in slides):
        raise DataError("all slides in a split must share (n_s, d_in)")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FILE_VERSION, len(slides), n_s, d_in))
        for s in slides:
            fh.write(np.ascontiguousarray(s.instances, dtype="<f8").tobytes())


def read_split_array(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n_slides, n_s, d_in = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic")
    if version != FILE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n_slides * n_s * d_in:
        raise DataError(f"{path}: size does not match header")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n_slides, n_s, d_in)


def save_dataset(out_dir: str | Path, splits: dict[str, list[Slide]], meta: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "scmil-dataset", "version": FILE_VERSION, "meta": meta, "splits": {}}
    for name, slides in splits.items():
        write_split(out / f"{name}.bin", slides)
        n_s = slides[0].n_instances
        manifest["splits"][name] = {
            "file": f"{name}.bin",
            "slides": [{"slide_id": s.slide_id, "label": int(s.label), "domain": s.domain,
                        "offset": i * n_s, "n_instances": n_s} for i, s in enumerate(slides)],
        }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(data_dir: str | Path, splits: Sequence[str] | None = None) -> tuple[dict[str, list[Slide]], dict]:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "scmil-dataset":
        raise DataError(f"{root}: not a dataset directory")
    if manifest.get("version") != FILE_VERSION:
        raise DataError(f"{root}: unsupported dataset version {manifest.get('version')}")
    out = {}
    for name, entry in manifest["splits"].items():
        if splits is not None and name not in splits:
            continue
        arr = read_split_array(root / entry["file"])
        if arr.shape[0] != len(entry["slides"]):
            raise DataError(f"{name}: manifest lists {len(entry['slides'])} slides, file has {arr.shape[0]}")
        out[name] = [Slide(arr[i], int(s["label"]), s["slide_id"], s["domain"])
                     for i, s in enumerate(entry["slides"])]
    if splits is not None:
        missing = set(splits) - set(out)
        if missing:
            raise DataError(f"{root}: missing splits {sorted(missing)}")
    return out, manifest.get("meta", {})


def spec_to_dict(obj) -> dict:
    d = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
