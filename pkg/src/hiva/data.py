"""Label tables, AU description files, synthetic data and batching."""

from __future__ import annotations

import colorsys
import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed label tables, description files or dataset specs."""


@dataclass
class AUSample:
    image: np.ndarray | None  # [H, W, 3] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 in {0, 1}
    sample_id: str


@dataclass
class DescriptionSet:
    au_ids: list[str]
    variants: list[list[str]]

    def __post_init__(self):
        if len(self.au_ids) != len(self.variants):
            raise DataError("au_ids and variants must have equal length")
        for au, texts in zip(self.au_ids, self.variants):
            if not texts:
                raise DataError(f"{au} has no description variants")
            if any(not t.strip() for t in texts):
                raise DataError(f"{au} has an empty description variant")

    @property
    def num_aus(self) -> int:
        return len(self.au_ids)


@dataclass
class LabeledBatch:
    images: np.ndarray  # [B, H, W, 3]
    labels: np.ndarray  # [B, N]
    sample_ids: list[str]


@dataclass
class SyntheticSpec:
    num_aus: int
    image_size: int = 32
    region_map: list[tuple[int, int, int, int]] | None = None  # (x0, y0, x1, y1), half-open
    cooccurrence: list[list[float]] | None = None
    num_samples: int = 64
    seed: int = 0
    jitter: int = 1
    noise: float = 0.04
    background: float = 0.15

    def __post_init__(self):
        if self.region_map is None:
            self.region_map = default_regions(self.num_aus, self.image_size)
        self.region_map = [tuple(int(v) for v in r) for r in self.region_map]
        if self.cooccurrence is None:
            self.cooccurrence = np.eye(self.num_aus).tolist()
        self.validate()

    def validate(self) -> None:
        if len(self.region_map) != self.num_aus:
            raise DataError(f"region_map has {len(self.region_map)} entries, expected {self.num_aus}")
        for i, (x0, y0, x1, y1) in enumerate(self.region_map):
            if not (0 <= x0 < x1 <= self.image_size and 0 <= y0 < y1 <= self.image_size):
                raise DataError(f"region {i} {(x0, y0, x1, y1)} lies outside the {self.image_size}px image")
        cov = np.asarray(self.cooccurrence, dtype=np.float64)
        if cov.shape != (self.num_aus, self.num_aus):
            raise DataError(f"cooccurrence must be {self.num_aus}x{self.num_aus}")
        if not np.allclose(cov, cov.T) or not np.allclose(np.diag(cov), 1.0):
            raise DataError("cooccurrence must be symmetric with unit diagonal")


def default_regions(num_aus: int, image_size: int) -> list[tuple[int, int, int, int]]:
    """Tile the image into a two-column grid with one rectangle per AU.

    The row count is rounded up to a power of two so region borders line up
    with power-of-two feature strides.
    """
    cols = 1 if num_aus == 1 else 2
    rows = 2 ** math.ceil(math.log2(math.ceil(num_aus / cols)))
    xs = np.linspace(0, image_size, cols + 1).round().astype(int)
    ys = np.linspace(0, image_size, rows + 1).round().astype(int)
    regions = []
    for i in range(num_aus):
        r, c = divmod(i, cols)
        regions.append((int(xs[c]), int(ys[r]), int(xs[c + 1]), int(ys[r + 1])))
    return regions


def au_color(i: int, num_aus: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(i / num_aus, 1.0, 1.0))


# ---------------------------------------------------------------------------
# label tables


def load_label_table(path: str | Path, au_count: int) -> list[AUSample]:
    """Parse a ``sample_id,<AU...>`` table into image-less samples.

    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"label table not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header") from None
        if not header or header[0].strip() != "sample_id":
            raise DataError(f"{path}: header must start with 'sample_id'")
        au_names = [h.strip() for h in header[1:]]
        if len(au_names) != au_count:
            raise DataError(f"{path}: header declares {len(au_names)} AU columns, expected {au_count}")
        samples = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != au_count + 1:
                raise DataError(f"{path}: row {row_no} has {len(row) - 1} AU cells, expected {au_count}")
            labels = []
            for name, cell in zip(au_names, row[1:]):
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise DataError(f"{path}: row {row_no}, column {name!r}: non-binary value {cell!r}")
                labels.append(int(cell))
            samples.append(AUSample(image=None, labels=np.array(labels, dtype=np.int64), sample_id=row[0].strip()))
    return samples


def read_label_header(path: str | Path) -> list[str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh))[1:]]


def write_label_table(samples: Sequence[AUSample], au_ids: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", *au_ids])
        for s in samples:
            writer.writerow([s.sample_id, *(int(v) for v in s.labels)])


# ---------------------------------------------------------------------------
# description files


def parse_description_text(text: str) -> dict[str, list[str]]:
    records: dict[str, list[str]] = {}
    current = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        if raw[0] in " \t":
            if current is None:
                raise DataError(f"line {line_no}: variant before any AU id")
            records[current].append(raw.strip())
        else:
            current = raw.strip().rstrip(":")
            if current in records:
                raise DataError(f"line {line_no}: {current} declared twice")
            records[current] = []
    return records


def load_description_set(path: str | Path, au_ids: Sequence[str] | int) -> DescriptionSet:
    """Load AU descriptions, ordered by ``au_ids``.

    ``au_ids`` is the canonical label ordering from the config. Passing an
    int takes the first ``au_ids`` records in file order instead.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"description file not found: {path}")
    records = parse_description_text(path.read_text(encoding="utf-8"))
    if isinstance(au_ids, int):
        if len(records) < au_ids:
            raise DataError(f"{path}: {len(records)} AUs listed, expected at least {au_ids}")
        au_ids = list(records)[:au_ids]
    variants = []
    for au in au_ids:
        if au not in records:
            raise DataError(f"{path}: no descriptions for {au}")
        texts = records[au]
        if not texts:
            raise DataError(f"{path}: {au} has an empty variant list")
        unique = list(dict.fromkeys(texts))
        if len(unique) != len(texts):
            warnings.warn(f"{au}: dropped {len(texts) - len(unique)} duplicate description variant(s)", stacklevel=2)
        variants.append(unique)
    return DescriptionSet(au_ids=list(au_ids), variants=variants)


def write_description_set(descriptions: DescriptionSet, path: str | Path) -> None:
    lines = []
    for au, texts in zip(descriptions.au_ids, descriptions.variants):
        lines.append(au)
        lines.extend(f"    {t}" for t in texts)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# class weights


def compute_class_weights(samples: Sequence[AUSample] | np.ndarray) -> np.ndarray:
    """Inverse positive-frequency weights rescaled to mean 1.

    Frequencies are clamped below at ``1 / (2 * num_samples)`` so an AU with
    no positives gets a large but finite weight.
    """
    labels = np.stack([s.labels for s in samples]) if not isinstance(samples, np.ndarray) else samples
    if labels.shape[0] == 0:
        raise DataError("cannot compute class weights from zero samples")
    freq = labels.astype(np.float64).mean(axis=0)
    f_min = 1.0 / (2 * labels.shape[0])
    zero = np.flatnonzero(freq == 0)
    if zero.size:
        warnings.warn(f"AU index(es) {zero.tolist()} have no positives; frequency clamped to {f_min}", stacklevel=2)
    w = 1.0 / np.maximum(freq, f_min)
    return w / w.mean()


# ---------------------------------------------------------------------------
# synthetic data


def sample_labels(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    cov = np.asarray(spec.cooccurrence, dtype=np.float64)
    z = rng.multivariate_normal(np.zeros(spec.num_aus), cov, size=spec.num_samples, method="cholesky")
    return (z > 0).astype(np.int64)


def render_image(labels: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Render one uint8 image: noisy background plus a coloured patch per active AU."""
    size = spec.image_size
    img = spec.background + spec.noise * rng.uniform(-1.0, 1.0, size=(size, size, 3))
    for i in np.flatnonzero(labels):
        x0, y0, x1, y1 = spec.region_map[i]
        j = spec.jitter
        w = max(x1 - x0 - 2 * j, 1)
        h = max(y1 - y0 - 2 * j, 1)
        dx = int(rng.integers(0, x1 - x0 - w + 1))
        dy = int(rng.integers(0, y1 - y0 - h + 1))
        img[y0 + dy:y0 + dy + h, x0 + dx:x0 + dx + w] = 0.1 + 0.85 * au_color(int(i), spec.num_aus)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[AUSample]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = sample_labels(spec, rng)
    samples = []
    for n in range(spec.num_samples):
        img = render_image(labels[n], spec, rng)
        samples.append(AUSample(image=img.astype(np.float32) / 255.0, labels=labels[n], sample_id=f"syn{n:05d}"))
    return samples


def save_dataset(samples: Sequence[AUSample], au_ids: Sequence[str], out_dir: str | Path,
                 spec: SyntheticSpec | None = None) -> Path:
    """Write images as PNG, a label table and (optionally) a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        arr = np.round(s.image * 255).astype(np.uint8)
        Image.fromarray(arr).save(out / "images" / f"{s.sample_id}.png")
    write_label_table(samples, au_ids, out / "labels.csv")
    if spec is not None:
        manifest = {"au_ids": list(au_ids), "spec": asdict(spec)}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir: str | Path, au_ids: Sequence[str]) -> list[AUSample]:
    data_dir = Path(data_dir)
    header = read_label_header(data_dir / "labels.csv")
    if list(header) != list(au_ids):
        raise DataError(f"label columns {header} do not match configured AUs {list(au_ids)}")
    samples = load_label_table(data_dir / "labels.csv", len(au_ids))
    for s in samples:
        img_path = data_dir / "images" / f"{s.sample_id}.png"
        if not img_path.is_file():
            raise DataError(f"missing image for {s.sample_id}: {img_path}")
        s.image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
    return samples


def load_manifest(data_dir: str | Path) -> SyntheticSpec | None:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        return None
    return SyntheticSpec(**json.loads(path.read_text())["spec"])


# ---------------------------------------------------------------------------
# batching


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def batch_iterator(samples: Sequence[AUSample], batch_size: int, seed: int) -> Iterator[LabeledBatch]:
    """One shuffled pass over ``samples``; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        idx = order[start:start + batch_size]
        yield LabeledBatch(
            images=np.stack([samples[i].image for i in idx]).astype(np.float32),
            labels=np.stack([samples[i].labels for i in idx]),
            sample_ids=[samples[i].sample_id for i in idx],
        )


def subject_folds(subject_ids: Sequence[str], num_folds: int = 3, seed: int = 0) -> dict[str, int]:
    """Assign each subject to a fold by a seeded hash of its id."""
    import hashlib

    folds = {}
    for sid in sorted(set(subject_ids)):
        digest = hashlib.sha256(f"{seed}:{sid}".encode()).digest()
        folds[sid] = int.from_bytes(digest[:8], "little") % num_folds
    return folds
