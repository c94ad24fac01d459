"""Book manifests, class balancing, stratified splitting and batching.

Manifest CSV rows (no header)::

    id, imageFile, imageUrl, title, author, classId, className

Randomness is always drawn from ``numpy.random.Generator`` objects; the
pipeline derives one per stage from the run seed so that (manifest, seed)
fixes every output.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import classes as _classes
from .errors import (
    DataProtocolError,
    ImageDecodeError,
    ManifestError,
    UnderpopulatedClassError,
    UnknownClassError,
)
from .imageio import load_image

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "imageFile", "imageUrl", "title", "author", "classId", "className")

# stage tags mixed into the seed
_RESOLVE, _BALANCE, _SPLIT, _SHUFFLE = 1, 2, 3, 4


def stage_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *tags])


@dataclass(frozen=True)
class BookRecord:
    id: str
    image_file: str
    title: str
    author: str
    class_id: int
    class_name: str
    image_url: str = ""

    def row(self):
        return [self.id, self.image_file, self.image_url, self.title, self.author, str(self.class_id),
                self.class_name]


# ---------------------------------------------------------------------------
# class table
# ---------------------------------------------------------------------------

def parse_class_table(data: bytes) -> dict:
    table = {}
    reader = csv.reader(io.StringIO(data.decode("utf-8")))
    for lineno, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != 2:
            raise ManifestError(f"class table row needs 2 fields, got {len(row)}", line=lineno)
        try:
            cid = int(row[0])
        except ValueError:
            raise ManifestError(f"bad class id {row[0]!r}", line=lineno) from None
        if cid in table:
            raise ManifestError(f"duplicate class id {cid}", line=lineno)
        table[cid] = row[1]
    return table


def format_class_table(table: dict) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for cid in sorted(table):
        w.writerow([cid, table[cid]])
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def parse_manifest(data: bytes, class_table: dict | None = None) -> list[BookRecord]:
    table = _classes.DEFAULT_CLASS_TABLE if class_table is None else class_table
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"manifest is not UTF-8: {exc}") from None
    records = []
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    try:
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}", line=lineno)
            rid, image_file, url, title, author, cid, cname = row
            if not rid:
                raise ManifestError("empty id", line=lineno)
            try:
                class_id = int(cid)
            except ValueError:
                raise ManifestError(f"bad classId {cid!r}", line=lineno) from None
            if class_id not in table:
                raise UnknownClassError(f"unknown classId {class_id}", line=lineno)
            if cname != table[class_id]:
                raise ManifestError(
                    f"className {cname!r} does not match class table entry {table[class_id]!r}", line=lineno
                )
            records.append(BookRecord(rid, image_file, title, author, class_id, cname, url))
    except csv.Error as exc:
        raise ManifestError(f"CSV error: {exc}", line=reader.line_num) from None
    return records


def write_manifest(records) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow(r.row())
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# single-category resolution, balancing, splitting
# ---------------------------------------------------------------------------

def resolve_single_class(candidates, rng) -> BookRecord:
    """Pick one of several category rows for the same book, uniformly."""
    if len(candidates) == 1:
        return candidates[0]
    return candidates[int(rng.integers(len(candidates)))]


def resolve_duplicates(records, rng) -> list[BookRecord]:
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.id, []).append(r)
    return [resolve_single_class(group, rng) for group in groups.values()]


def class_counts(records) -> dict:
    counts: dict[int, int] = defaultdict(int)
    for r in records:
        counts[r.class_id] += 1
    return dict(counts)


def _by_class(records):
    out = defaultdict(list)
    for r in records:
        out[r.class_id].append(r)
    return out


def balance_classes(records, per_class: int = _classes.PER_CLASS, included=None, rng=None):
    """Uniform random subsample of exactly ``per_class`` records from each included class."""
    grouped = _by_class(records)
    included = sorted(grouped) if included is None else sorted(included)
    out = []
    for cid in included:
        pool = grouped.get(cid, [])
        if len(pool) < per_class:
            name = pool[0].class_name if pool else str(cid)
            raise UnderpopulatedClassError(name, len(pool), per_class)
        chosen = np.sort(rng.choice(len(pool), size=per_class, replace=False))
        out.extend(pool[i] for i in chosen)
    return out


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LabelMap:
    """Dense experiment index <-> raw class id."""

    class_ids: tuple
    class_names: tuple

    @classmethod
    def from_records(cls, records):
        ids = sorted({r.class_id for r in records})
        names = {r.class_id: r.class_name for r in records}
        return cls(tuple(ids), tuple(names[i] for i in ids))

    def index(self, class_id):
        return self.class_ids.index(class_id)

    def encode(self, records):
        lookup = {cid: i for i, cid in enumerate(self.class_ids)}
        return np.array([lookup[r.class_id] for r in records], dtype=np.int64)

    def __len__(self):
        return len(self.class_ids)

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for i, (cid, name) in enumerate(zip(self.class_ids, self.class_names)):
            w.writerow([i, cid, name])
        return buf.getvalue().encode("utf-8")

    @classmethod
    def from_csv(cls, data: bytes):
        ids, names = [], []
        for lineno, row in enumerate(csv.reader(io.StringIO(data.decode("utf-8"))), start=1):
            if not row:
                continue
            if len(row) != 3 or int(row[0]) != len(ids):
                raise ManifestError("label map rows must be dense index,classId,className", line=lineno)
            ids.append(int(row[1]))
            names.append(row[2])
        return cls(tuple(ids), tuple(names))


@dataclass
class SplitManifest:
    train: list
    test: list
    seed: int
    per_class: int
    label_map: LabelMap = None
    excluded: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label_map is None:
            self.label_map = LabelMap.from_records(self.train + self.test)


def split(records, train_frac: float = 0.9, rng=None, seed: int = 0) -> SplitManifest:
    """Per-class stratified shuffle split."""
    if not 0.0 < train_frac < 1.0:
        raise DataProtocolError(f"train_frac must be in (0, 1), got {train_frac}")
    grouped = _by_class(records)
    train, test = [], []
    sizes = set()
    for cid in sorted(grouped):
        pool = grouped[cid]
        sizes.add(len(pool))
        order = rng.permutation(len(pool))
        n_train = round_half_up(train_frac * len(pool))
        train.extend(pool[i] for i in order[:n_train])
        test.extend(pool[i] for i in order[n_train:])
    per_class = sizes.pop() if len(sizes) == 1 else 0
    return SplitManifest(train, test, seed, per_class)


def prepare(records, seed: int, per_class: int = _classes.PER_CLASS, class_count: int = _classes.EXPERIMENT_CLASSES,
            include=None, train_frac: float = 0.9) -> SplitManifest:
    """Full dataset protocol: resolve multi-category books, balance, split.

    Without ``include`` every class holding at least ``per_class`` books is
    kept and the rest are dropped; the kept count must equal ``class_count``.
    """
    unique = resolve_duplicates(records, stage_rng(seed, _RESOLVE))
    counts = class_counts(unique)
    excluded = {}
    if include is None:
        include = sorted(c for c, n in counts.items() if n >= per_class)
        excluded = {c: n for c, n in counts.items() if n < per_class}
        for cid, n in sorted(excluded.items()):
            name = next(r.class_name for r in unique if r.class_id == cid)
            log.info("excluding class %r: %d books < %d", name, n, per_class)
        if class_count and len(include) != class_count:
            raise DataProtocolError(
                f"{len(include)} classes have >= {per_class} books, expected {class_count}"
            )
    balanced = balance_classes(unique, per_class, include, stage_rng(seed, _BALANCE))
    result = split(balanced, train_frac, stage_rng(seed, _SPLIT), seed=seed)
    result.per_class = per_class
    result.excluded = excluded
    return result


def save_split(directory, manifest: SplitManifest):
    os.makedirs(directory, exist_ok=True)
    files = {
        "train.csv": write_manifest(manifest.train),
        "test.csv": write_manifest(manifest.test),
        "label_map.csv": manifest.label_map.to_csv(),
        "split.json": (json.dumps(
            {
                "seed": manifest.seed,
                "perClass": manifest.per_class,
                "train": len(manifest.train),
                "test": len(manifest.test),
                "excluded": {str(k): v for k, v in sorted(manifest.excluded.items())},
            },
            indent=2, sort_keys=True,
        ) + "\n").encode("utf-8"),
    }
    for name, data in files.items():
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(data)
    return sorted(files)


def load_split(directory) -> SplitManifest:
    def read(name):
        try:
            with open(os.path.join(directory, name), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise DataProtocolError(f"prepared split is missing {name} in {directory}") from None

    info = json.loads(read("split.json"))
    label_map = LabelMap.from_csv(read("label_map.csv"))
    table = dict(zip(label_map.class_ids, label_map.class_names))
    return SplitManifest(
        parse_manifest(read("train.csv"), table),
        parse_manifest(read("test.csv"), table),
        info["seed"], info["perClass"], label_map,
        {int(k): v for k, v in info.get("excluded", {}).items()},
    )


# ---------------------------------------------------------------------------
# images and batches
# ---------------------------------------------------------------------------

class ImageLoader:
    """Decode/resize records into NHWC tensors, optionally mean-centred.

    Failed decodes are logged and skipped unless ``on_error="raise"``.
    ``threads > 1`` decodes in a pool; output order never depends on it.
    """

    def __init__(self, image_root, height, width, mean=None, dtype=np.float32, cache=True,
                 threads=1, on_error="skip"):
        self.image_root = image_root
        self.height = height
        self.width = width
        self.mean = None if mean is None else np.asarray(mean, dtype=dtype)
        self.dtype = dtype
        self.threads = threads
        self.on_error = on_error
        self._cache = {} if cache else None

    def path(self, record):
        if self.image_root is None or os.path.isabs(record.image_file):
            return record.image_file
        return os.path.join(self.image_root, record.image_file)

    def _decode(self, record):
        if self._cache is not None and record.id in self._cache:
            return self._cache[record.id]
        try:
            img = load_image(self.path(record), self.height, self.width, self.dtype)
        except ImageDecodeError as exc:
            exc.record_id = record.id
            if self.on_error == "raise":
                raise
            log.warning("skipping record %s: %s", record.id, exc)
            img = None
        if self._cache is not None:
            self._cache[record.id] = img
        return img

    def load(self, records):
        """Return ``(batch, kept_records)``."""
        if self.threads > 1 and len(records) > 1:
            with concurrent.futures.ThreadPoolExecutor(self.threads) as pool:
                images = list(pool.map(self._decode, records))
        else:
            images = [self._decode(r) for r in records]
        kept = [(img, r) for img, r in zip(images, records) if img is not None]
        if not kept:
            return np.zeros((0, self.height, self.width, 3), dtype=self.dtype), []
        batch = np.concatenate([k[0] for k in kept], axis=0)
        if self.mean is not None:
            batch = batch - self.mean
        return batch, [k[1] for k in kept]


def channel_mean(records, loader: ImageLoader):
    """Per-channel pixel mean over ``records`` (float64 accumulation, uncentred)."""
    saved, loader.mean = loader.mean, None
    total = np.zeros(3, dtype=np.float64)
    count = 0
    try:
        for start in range(0, len(records), 256):
            batch, _ = loader.load(records[start : start + 256])
            total += batch.astype(np.float64).sum(axis=(0, 1, 2))
            count += batch.shape[0] * batch.shape[1] * batch.shape[2]
    finally:
        loader.mean = saved
    return total / max(count, 1)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return stage_rng(seed, _SHUFFLE, epoch).permutation(n)


def batch_count(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batch_records(records, batch_size: int, seed: int, epoch: int, index: int):
    """Records of batch ``index`` in epoch ``epoch``."""
    order = epoch_order(len(records), seed, epoch)
    return [records[i] for i in order[index * batch_size : (index + 1) * batch_size]]


def step_records(records, batch_size: int, seed: int, step: int):
    """Records for global training step ``step`` (epochs run back to back)."""
    per_epoch = batch_count(len(records), batch_size)
    return batch_records(records, batch_size, seed, step // per_epoch, step % per_epoch)


def batches(records, batch_size: int, seed: int, epoch: int, label_map: LabelMap, loader: ImageLoader):
    """Yield ``(tensor, labels)`` over one shuffled epoch; the last batch may be short."""
    if batch_size < 1:
        raise DataProtocolError("batch_size must be >= 1")
    order = epoch_order(len(records), seed, epoch)
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        batch, kept = loader.load(chunk)
        yield batch, label_map.encode(kept)
