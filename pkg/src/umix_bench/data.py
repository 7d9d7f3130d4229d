"""Synthetic subpopulation-shift datasets and CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RngStream

SPLITS = ("train", "val", "test")

# four-moons: group -> label
FOUR_MOONS_LABELS = np.array([0, 1, 0, 1])
# translation of groups 2 and 3: each minority arc sits on the far side of the
# majority moons, where the other label's region extends
FOUR_MOONS_SHIFT = {2: np.array([2.5, -2.5]), 3: np.array([-2.5, 2.5])}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray | None = None
    split: str = "train"
    name: str = ""
    n_classes: int | None = None
    n_groups: int | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-D matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DatasetError(f"{n} feature rows but {self.labels.shape[0]} labels")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels outside [0, {self.n_classes})")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape != (n,):
                raise DatasetError("group vector length differs from n")
            if self.n_groups is None:
                self.n_groups = int(self.groups.max()) + 1 if n else 0
            if n and (self.groups.min() < 0 or self.groups.max() >= self.n_groups):
                raise DatasetError(f"groups outside [0, {self.n_groups})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def has_groups(self) -> bool:
        return self.groups is not None

    def group_counts(self) -> np.ndarray:
        if self.groups is None:
            raise DatasetError(f"dataset {self.name!r} has no group labels")
        return np.bincount(self.groups, minlength=self.n_groups)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.features.shape, dtype=np.int64).tobytes())
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        if self.groups is not None:
            h.update(self.groups.tobytes())
        return h.hexdigest()[:32]

    def without_groups(self) -> "Dataset":
        return Dataset(self.features, self.labels, None, self.split, self.name, self.n_classes)

    def subset(self, idx) -> "Dataset":
        g = None if self.groups is None else self.groups[idx]
        return Dataset(self.features[idx], self.labels[idx], g, self.split, self.name,
                       self.n_classes, self.n_groups)

    def equals(self, other: "Dataset") -> bool:
        same_groups = (self.groups is None and other.groups is None) or (
            self.groups is not None and other.groups is not None
            and np.array_equal(self.groups, other.groups))
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and same_groups and self.split == other.split)


# --------------------------------------------------------------------------
# four moons
# --------------------------------------------------------------------------

@dataclass
class FourMoonsSpec:
    samples_per_group: tuple = (1000, 1000, 50, 50)
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.samples_per_group = tuple(int(k) for k in self.samples_per_group)
        if len(self.samples_per_group) != 4:
            raise ValueError("four-moons needs exactly four group sizes")
        if min(self.samples_per_group) < 1:
            raise ValueError("every group needs at least one sample")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


def moon_arc(group: int, t: np.ndarray) -> np.ndarray:
    """Noise-free point on group ``group``'s arc at angle ``t`` in [0, pi]."""
    if group % 2 == 0:
        pts = np.stack([np.cos(t), np.sin(t)], axis=1)
    else:
        pts = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    if group >= 2:
        pts = pts + FOUR_MOONS_SHIFT[group]
    return pts


def distance_to_arc(group: int, pts: np.ndarray) -> np.ndarray:
    """Distance from each point to group ``group``'s (half-circle) arc."""
    center = np.array([0.0, 0.0]) if group % 2 == 0 else np.array([1.0, 0.5])
    if group >= 2:
        center = center + FOUR_MOONS_SHIFT[group]
    rel = pts - center
    # upper half for even groups, lower half for odd ones
    sign = 1.0 if group % 2 == 0 else -1.0
    on_side = sign * rel[:, 1] >= 0
    radial = np.abs(np.hypot(rel[:, 0], rel[:, 1]) - 1.0)
    ends = np.stack([center + [1.0, 0.0], center + [-1.0, 0.0]])
    end_dist = np.min(np.linalg.norm(pts[:, None, :] - ends[None], axis=2), axis=1)
    return np.where(on_side, radial, end_dist)


def generate_four_moons(spec: FourMoonsSpec, split: str = "train") -> Dataset:
    gen = RngStream(spec.seed).stream("noise")
    feats, groups = [], []
    for g, k in enumerate(spec.samples_per_group):
        t = gen.uniform(0.0, np.pi, size=k)
        pts = moon_arc(g, t)
        if spec.noise_std > 0:
            pts = pts + gen.normal(0.0, spec.noise_std, size=pts.shape)
        feats.append(pts)
        groups.append(np.full(k, g))
    groups = np.concatenate(groups)
    return Dataset(np.concatenate(feats), FOUR_MOONS_LABELS[groups], groups, split,
                   "four_moons", n_classes=2, n_groups=4)


# --------------------------------------------------------------------------
# spurious-correlation toy
# --------------------------------------------------------------------------

@dataclass
class SpuriousSpec:
    """Groups are g = 2*label + attribute; groups 1 and 2 are the minority
    (attribute disagrees with label)."""

    n_train: int = 4000
    n_val: int = 20000
    n_test: int = 20000
    minority_fraction: float = 0.02
    core_separation: float = 3.0
    spurious_separation: float = 6.0
    noise_std: float = 1.0
    n_noise_dims: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.minority_fraction < 0.5:
            raise ValueError("minority_fraction must lie in (0, 0.5)")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.core_separation <= 0 or self.spurious_separation < 0:
            raise ValueError("separations must be positive (spurious may be 0)")
        for n in (self.n_train, self.n_val, self.n_test):
            if n < 4:
                raise ValueError("each split needs at least 4 samples")


def spurious_group_counts(n: int, minority_fraction: float) -> np.ndarray:
    minority = max(1, int(round(n * minority_fraction / 2)))
    rest = n - 2 * minority
    return np.array([rest - rest // 2, minority, minority, rest // 2])


def balanced_counts(n: int) -> np.ndarray:
    base = np.full(4, n // 4)
    base[: n % 4] += 1
    return base


def _spurious_split(spec: SpuriousSpec, counts, gen, split) -> Dataset:
    groups = np.repeat(np.arange(4), counts)
    labels = groups // 2
    attr = groups % 2
    n = len(groups)
    core = (labels - 0.5) * spec.core_separation + gen.normal(0, spec.noise_std, n)
    spur = (attr - 0.5) * spec.spurious_separation + gen.normal(0, spec.noise_std, n)
    noise = gen.normal(0, spec.noise_std, (n, spec.n_noise_dims))
    feats = np.column_stack([core, spur, noise])
    return Dataset(feats, labels, groups, split, "spurious", n_classes=2, n_groups=4)


def generate_spurious(spec: SpuriousSpec):
    """Return (train, val, test); train is group-imbalanced, val/test balanced."""
    rs = RngStream(spec.seed)
    train = _spurious_split(spec, spurious_group_counts(spec.n_train, spec.minority_fraction),
                            rs.stream("noise"), "train")
    val = _spurious_split(spec, balanced_counts(spec.n_val), rs.child(1).stream("noise"), "val")
    test = _spurious_split(spec, balanced_counts(spec.n_test), rs.child(2).stream("noise"), "test")
    return train, val, test


def make_blobs(n: int, d: int = 2, separation: float = 8.0, seed: int = 0) -> Dataset:
    """Two well-separated Gaussian blobs (linearly separable in practice)."""
    gen = RngStream(seed).stream("noise")
    labels = np.arange(n) % 2
    centers = np.zeros((2, d))
    centers[0, 0], centers[1, 0] = -separation / 2, separation / 2
    feats = centers[labels] + gen.normal(0, 0.5, (n, d))
    return Dataset(feats, labels, labels.copy(), "train", "blobs", n_classes=2, n_groups=2)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    header = [f"f{k}" for k in range(ds.d)] + ["label"]
    if ds.groups is not None:
        header.append("group")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]] + [int(ds.labels[i])]
            if ds.groups is not None:
                row.append(int(ds.groups[i]))
            w.writerow(row)


def load_csv(path, n_classes: int | None = None, n_groups: int | None = None,
             groups: str = "optional", split: str = "train", name: str | None = None) -> Dataset:
    """Read ``f0..f{d-1}, label[, group]``.

    ``groups`` is one of "required", "optional" or "ignore".
    """
    path = Path(path)
    if groups not in ("required", "optional", "ignore"):
        raise ValueError(f"bad groups mode {groups!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file (no header)") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise DatasetError(f"{path}: missing 'label' column")
        fcols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        fcols.sort(key=lambda i: int(header[i][1:]))
        if [int(header[i][1:]) for i in fcols] != list(range(len(fcols))):
            raise DatasetError(f"{path}: feature columns must be f0..f{{d-1}}")
        li = header.index("label")
        gi = header.index("group") if "group" in header else None
        if gi is None and groups == "required":
            raise DatasetError(f"{path}: group column required but absent")
        if groups == "ignore":
            gi = None
        feats, labels, grps = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(row[i]) for i in fcols])
                lab = int(row[li])
                grp = int(row[gi]) if gi is not None else None
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            if lab < 0 or (n_classes is not None and lab >= n_classes):
                raise DatasetError(f"{path}:{lineno}: label {lab} outside [0, {n_classes})")
            if grp is not None and (grp < 0 or (n_groups is not None and grp >= n_groups)):
                raise DatasetError(f"{path}:{lineno}: group {grp} outside [0, {n_groups})")
            labels.append(lab)
            if grp is not None:
                grps.append(grp)
    if not labels:
        raise DatasetError(f"{path}: dataset is empty")
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(labels), len(fcols)),
                   np.array(labels), np.array(grps) if gi is not None else None,
                   split, name or path.stem, n_classes, n_groups if gi is not None else None)
