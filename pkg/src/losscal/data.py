"""Datasets: the two-Gaussian synthetic task, label corruption, CSV/IDX IO.

The synthetic generator mirrors the imbalanced two-class setup used
throughout the experiments: isotropic Gaussians at (-1,-1) and (+1,+1),
90 negative / 10 positive training points, a freshly resampled test set
with the same counts, and 500 unlabeled calibration points drawn uniformly
from a box covering both clusters.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import child_seed, generator

Array = np.ndarray


@dataclass
class Dataset:
    X: Array
    y: Array | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ContractError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.intp)
            if self.y.shape != (self.X.shape[0],):
                raise ContractError(
                    f"labels shaped {self.y.shape} for {self.X.shape[0]} rows")
            if self.y.size and self.y.min() < 0:
                raise ContractError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    def n_classes(self) -> int:
        if self.class_names is not None:
            return len(self.class_names)
        if self.y is None or self.y.size == 0:
            raise ContractError("cannot infer class count from unlabeled data")
        return int(self.y.max()) + 1

    def subset(self, idx) -> "Dataset":
        y = None if self.y is None else self.y[idx]
        return Dataset(self.X[idx], y, self.class_names)


@dataclass(frozen=True)
class SyntheticSpec:
    means: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, -1.0), (1.0, 1.0))
    std: float = 1.0
    n_neg: int = 90
    n_pos: int = 10
    calib_n: int = 500
    calib_box: tuple[float, float] = (-3.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        if self.std <= 0:
            raise ContractError(f"std must be > 0, got {self.std}")
        if min(self.n_neg, self.n_pos, self.calib_n) < 0:
            raise ContractError("counts must be >= 0")
        if not self.calib_box[0] < self.calib_box[1]:
            raise ContractError(f"bad calibration box {self.calib_box}")


@dataclass(frozen=True)
class CorruptionSpec:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ContractError(f"corruption rate must be in [0,1], got {self.rate}")


_SYNTH_CLASSES = ("negative", "positive")


def _sample_two_class(spec: SyntheticSpec, seed: int) -> Dataset:
    rng = generator(seed)
    neg = np.asarray(spec.means[0]) + spec.std * rng.standard_normal((spec.n_neg, 2))
    pos = np.asarray(spec.means[1]) + spec.std * rng.standard_normal((spec.n_pos, 2))
    X = np.vstack([neg, pos])
    y = np.concatenate([np.zeros(spec.n_neg, dtype=np.intp),
                        np.ones(spec.n_pos, dtype=np.intp)])
    return Dataset(X, y, _SYNTH_CLASSES)


def gen_synthetic(spec: SyntheticSpec) -> dict[str, Dataset]:
    """Train/test/calib triple; train and test use independent seed streams."""
    train = _sample_two_class(spec, child_seed(spec.seed, 0))
    test = _sample_two_class(spec, child_seed(spec.seed, 1))
    rng = generator(child_seed(spec.seed, 2))
    lo, hi = spec.calib_box
    calib = Dataset(rng.uniform(lo, hi, size=(spec.calib_n, 2)), None, _SYNTH_CLASSES)
    return {"train": train, "test": test, "calib": calib}


def corrupt_labels(d: Dataset, spec: CorruptionSpec) -> Dataset:
    """Redraw labels of a random floor(rate*N) subset uniformly over all classes.

    The redraw may return the original label, so fewer than floor(rate*N)
    labels actually change; the expected effective flip rate is
    rate * (C-1)/C.
    """
    if not d.labeled:
        raise ContractError("corrupt_labels needs a labeled dataset")
    rng = generator(spec.seed)
    n_classes = d.n_classes()
    k = int(np.floor(spec.rate * d.n))
    y = d.y.copy()
    idx = rng.choice(d.n, size=k, replace=False)
    y[idx] = rng.integers(0, n_classes, size=k)
    return Dataset(d.X.copy(), y, d.class_names)


def split(d: Dataset, fractions, seed: int) -> list[Dataset]:
    """Seeded shuffle, then partition into len(fractions) pieces."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size == 0 or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ContractError(f"fractions must be >= 0 and sum to 1, got {fractions}")
    perm = generator(seed).permutation(d.n)
    bounds = np.round(np.cumsum(fr) * d.n).astype(int)
    out, start = [], 0
    for stop in bounds:
        out.append(d.subset(perm[start:stop]))
        start = stop
    return out


# ---------------------------------------------------------------------------
# CSV

def save_csv(path, d: Dataset) -> None:
    """Header f0..f{D-1}[,label]; floats written with full round-trip precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"f{i}" for i in range(d.dim)]
        if d.labeled:
            header.append("label")
        writer.writerow(header)
        for i in range(d.n):
            row = [repr(float(v)) for v in d.X[i]]
            if d.labeled:
                row.append(str(int(d.y[i])))
            writer.writerow(row)


def load_csv(path, class_names=None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ContractError(f"{path}: empty CSV") from None
        labeled = bool(header) and header[-1] == "label"
        dim = len(header) - (1 if labeled else 0)
        expected = [f"f{i}" for i in range(dim)] + (["label"] if labeled else [])
        if header != expected:
            raise ContractError(f"{path}: header {header!r}, expected {expected!r}")
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ContractError(f"{path}:{lineno}: {len(row)} fields, "
                                    f"expected {len(header)}")
            try:
                xs.append([float(v) for v in row[:dim]])
                if labeled:
                    ys.append(int(row[dim]))
            except ValueError as exc:
                raise ContractError(f"{path}:{lineno}: {exc}") from None
    X = np.asarray(xs, dtype=np.float64).reshape(len(xs), dim)
    return Dataset(X, np.asarray(ys, dtype=np.intp) if labeled else None, class_names)


# ---------------------------------------------------------------------------
# IDX (big-endian magic; ubyte payloads, pixels scaled to [0,1])

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path) -> Array:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ContractError(f"{path}: truncated IDX header at byte {len(blob)}")
    magic = struct.unpack(">i", blob[:4])[0]
    if magic not in (_IDX_IMAGES, _IDX_LABELS):
        raise ContractError(f"{path}: bad IDX magic 0x{magic:08x} at byte 0")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise ContractError(f"{path}: truncated IDX dims at byte {len(blob)}")
    dims = struct.unpack(f">{ndim}i", blob[4:header_len])
    count = int(np.prod(dims))
    if len(blob) != header_len + count:
        raise ContractError(
            f"{path}: payload has {len(blob) - header_len} bytes at offset "
            f"{header_len}, expected {count}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=header_len)
    return data.reshape(dims)


def load_idx(image_path, label_path=None, class_names=None) -> Dataset:
    """MNIST-style IDX pair; images flatten to rows and scale by 1/255."""
    images = _read_idx(image_path)
    if images.ndim != 3:
        raise ContractError(f"{image_path}: expected 3-D image tensor, "
                            f"got {images.ndim}-D")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = None
    if label_path is not None:
        labels = _read_idx(label_path)
        if labels.ndim != 1:
            raise ContractError(f"{label_path}: expected 1-D labels")
        if labels.shape[0] != X.shape[0]:
            raise ContractError(
                f"{label_path}: {labels.shape[0]} labels for {X.shape[0]} images")
        y = labels.astype(np.intp)
    return Dataset(X, y, class_names)
