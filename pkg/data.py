#!/usr/bin/env python3
"""
Datasets: synthetic three-blob sets with a designed hard-class pair, MNIST IDX files,
class-balanced subsampling and seeded minibatches. Features always live in [0, 1].
"""
import argparse
import gzip
import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
SHUFFLE_STREAM = 2
BOX_LO, BOX_HI = 0.0, 1.0


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"features {self.features.shape} / labels {self.labels.shape} mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.features.size and (self.features.min() < BOX_LO or self.features.max() > BOX_HI):
            raise ValueError(f"features of {self.name!r} leave the [{BOX_LO}, {BOX_HI}] box")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def dim(self):
        return int(self.features.shape[1])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.class_count)

    def take(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count, name or self.name, dict(self.meta))


def _default_center(axis, dist, dim=10):
    c = [0.0] * dim
    if dist:
        c[axis] = dist
    return c


class TripletGeometry(BaseModel):
    """Three isotropic blobs; A–B is the designed hard-class pair."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    dim: int = Field(10, ge=2)
    center_a: list[float] = Field(default_factory=lambda: _default_center(0, 0.0))
    center_b: list[float] = Field(default_factory=lambda: _default_center(0, 2.0))
    center_c: list[float] = Field(default_factory=lambda: _default_center(1, 6.0))
    sigma: float = Field(0.5, ge=0.0)
    n_per_class: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _check_geometry(self):
        a, b, c = self.centers()
        if a.shape != (self.dim,) or b.shape != (self.dim,) or c.shape != (self.dim,):
            raise ValueError(f"centers must have length dim={self.dim}")
        if np.array_equal(a, b) or np.array_equal(a, c) or np.array_equal(b, c):
            raise ValueError("degenerate geometry: centers coincide")
        if not np.linalg.norm(a - b) < np.linalg.norm(a - c):
            raise ValueError("need ‖A−B‖ < ‖A−C‖ so that A–B is the hard pair")
        return self

    def centers(self):
        return (np.asarray(self.center_a, dtype=np.float64),
                np.asarray(self.center_b, dtype=np.float64),
                np.asarray(self.center_c, dtype=np.float64))

    def hard_pairs(self):
        """class -> nearest other class (designed HCP ground truth)."""
        cs = self.centers()
        out = {}
        for i, ci in enumerate(cs):
            d = [np.linalg.norm(ci - cj) if j != i else np.inf for j, cj in enumerate(cs)]
            out[i] = int(np.argmin(d))
        return out


def gen_triplet(geom: TripletGeometry, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    n = geom.n_per_class
    raw = np.concatenate([c + geom.sigma * rng.standard_normal((n, geom.dim)) for c in geom.centers()])
    labels = np.repeat(np.arange(3), n)
    lo, hi = float(raw.min()), float(raw.max())
    scale = 1.0 / (hi - lo) if hi > lo else 1.0
    # one global affine map keeps the blobs isotropic
    features = np.clip((raw - lo) * scale, BOX_LO, BOX_HI)
    meta = {"offset": lo, "scale": scale, "hard_pairs": geom.hard_pairs()}
    return Dataset(features, labels, 3, f"triplet(seed={seed})", meta)


# ==========================
# IDX
# ==========================
def _read_bytes(path):
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _header(buf, path, magic, ndims):
    need = 4 * (1 + ndims)
    if len(buf) < 4 or struct.unpack(">I", buf[:4])[0] != magic:
        raise ValueError(f"not an IDX file: {path}")
    if len(buf) < need:
        raise ValueError(f"truncated IDX file {path}: header ends at byte {len(buf)}, expected {need}")
    return struct.unpack(f">{ndims}I", buf[4:need]), need


def load_idx(images_path, labels_path, name=None) -> Dataset:
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    (count, rows, cols), off = _header(img, images_path, IMAGES_MAGIC, 3)
    (lcount,), loff = _header(lab, labels_path, LABELS_MAGIC, 1)
    if count != lcount:
        raise ValueError(f"image count {count} != label count {lcount}")
    need = off + count * rows * cols
    if len(img) < need:
        raise ValueError(f"truncated IDX file {images_path}: data ends at byte offset {len(img)}, expected {need}")
    if len(lab) < loff + count:
        raise ValueError(f"truncated IDX file {labels_path}: data ends at byte offset {len(lab)}, expected {loff + count}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=off)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=count, offset=loff).astype(np.int64)
    class_count = int(labels.max()) + 1 if count else 1
    meta = {"rows": rows, "cols": cols}
    return Dataset(features, labels, class_count, name or Path(images_path).name, meta)


def write_idx(images, labels, images_path, labels_path, rows=None, cols=None):
    """images: (N, rows*cols) floats in [0,1] or uint8."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n = images.shape[0]
    if rows is None or cols is None:
        side = int(round(np.sqrt(images.shape[1])))
        rows, cols = side, images.shape[1] // max(side, 1)
    for p in (images_path, labels_path):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGES_MAGIC, n, rows, cols))
        f.write(images.reshape(n, rows * cols).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ==========================
# sampling / batching
# ==========================
def subsample(data: Dataset, per_class: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    counts = data.class_counts()
    short = [c for c in range(data.class_count) if counts[c] < per_class]
    if short:
        raise ValueError(f"subsample: classes {short} have fewer than {per_class} samples "
                         f"(counts {[int(counts[c]) for c in short]})")
    picked = [rng.choice(np.flatnonzero(data.labels == c), size=per_class, replace=False)
              for c in range(data.class_count)]
    idx = rng.permutation(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)
    return data.take(idx, f"{data.name}[{per_class}/class]")


def batches(data, batch_size, seed, epoch):
    """Seeded shuffle keyed by (seed, epoch); the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data) if not isinstance(data, int) else data
    perm = np.random.default_rng([seed, SHUFFLE_STREAM, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def main():
    ap = argparse.ArgumentParser(description="inspect an IDX pair or dump a triplet dataset")
    ap.add_argument("--images")
    ap.add_argument("--labels")
    ap.add_argument("--triplet_seed", type=int)
    ap.add_argument("--out", help="write the triplet set as an IDX pair with this prefix")
    args = ap.parse_args()
    if args.images and args.labels:
        try:
            ds = load_idx(args.images, args.labels)
        except (OSError, ValueError) as e:
            print(str(e), file=sys.stderr)
            sys.exit(2)
    elif args.triplet_seed is not None:
        ds = gen_triplet(TripletGeometry(), args.triplet_seed)
        if args.out:
            write_idx(ds.features, ds.labels, args.out + "-images-idx3-ubyte", args.out + "-labels-idx1-ubyte",
                      rows=1, cols=ds.dim)
    else:
        print("missing --images/--labels or --triplet_seed", file=sys.stderr)
        sys.exit(2)
    print(json.dumps({"name": ds.name, "count": len(ds), "dim": ds.dim,
                      "class_counts": ds.class_counts().tolist()}, ensure_ascii=False))


if __name__ == "__main__":
    main()
