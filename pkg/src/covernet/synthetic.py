"""Synthetic cover datasets for smoke tests and desk-scale runs.

Each class gets its own hue and stripe orientation, so small networks can
separate them quickly.
"""

from __future__ import annotations

import colorsys
import os

import numpy as np

from .classes import DEFAULT_CLASS_TABLE
from .data import BookRecord, format_class_table, write_manifest
from .imageio import encode_ppm


def cover_pixels(class_index, class_count, height, width, rng, noise=0.08):
    """An H x W x 3 uint8 cover for ``class_index``."""
    r, g, b = colorsys.hsv_to_rgb(class_index / class_count, 0.8, 0.9)
    base = np.array([r, g, b])
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    angle = np.pi * (class_index % 6) / 6
    freq = 2 + (class_index // 6) % 5
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    img = base[None, None, :] * (0.55 + 0.45 * stripes[..., None])
    img = img + noise * rng.standard_normal(img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_records(counts: dict, class_table=None, duplicates=0, rng=None, image_ext=".ppm"):
    """Manifest rows with ``counts[class_id]`` unique books per class.

    ``duplicates`` extra rows re-list existing books under a second category,
    mimicking multi-category books.
    """
    table = DEFAULT_CLASS_TABLE if class_table is None else class_table
    rng = rng or np.random.default_rng(0)
    records = []
    for cid in sorted(counts):
        for j in range(counts[cid]):
            bid = f"b{cid:02d}{j:06d}"
            records.append(BookRecord(bid, f"{bid}{image_ext}", f"Title {j}, vol. {cid}", f"Author {j % 97}",
                                      cid, table[cid], f"http://example.invalid/{bid}.jpg"))
    if duplicates:
        ids = sorted(table)
        picks = rng.choice(len(records), size=duplicates, replace=False)
        for i in picks:
            r = records[int(i)]
            other = ids[(ids.index(r.class_id) + 1 + int(rng.integers(len(ids) - 1))) % len(ids)]
            records.append(BookRecord(r.id, r.image_file, r.title, r.author, other, table[other], r.image_url))
    return records


def write_dataset(directory, counts: dict, height=56, width=56, seed=0, class_table=None, duplicates=0):
    """Write images, ``manifest.csv`` and ``classes.csv`` under ``directory``; return the records."""
    table = DEFAULT_CLASS_TABLE if class_table is None else class_table
    rng = np.random.default_rng(seed)
    records = make_records(counts, table, duplicates, rng)
    image_dir = os.path.join(directory, "images")
    os.makedirs(image_dir, exist_ok=True)
    class_index = {cid: i for i, cid in enumerate(sorted(table))}
    written = set()
    for r in records:
        if r.id in written:
            continue
        written.add(r.id)
        px = cover_pixels(class_index[r.class_id], len(table), height, width, rng)
        with open(os.path.join(image_dir, r.image_file), "wb") as fh:
            fh.write(encode_ppm(px))
    with open(os.path.join(directory, "manifest.csv"), "wb") as fh:
        fh.write(write_manifest(records))
    with open(os.path.join(directory, "classes.csv"), "wb") as fh:
        fh.write(format_class_table(table))
    return records
