"""Synthetic datasets and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

DOMAIN = (-3.0, 3.0)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    domain_box: np.ndarray
    splits: np.ndarray
    n_classes: int
    provenance: dict = field(default_factory=dict)
    margin: float = float("nan")

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        self.domain_box = np.asarray(self.domain_box, dtype=np.float64)
        self.splits = np.asarray(self.splits)
        if len(self.features) != len(self.labels) or len(self.labels) != len(self.splits):
            raise ContractError("features, labels and split tags must have equal length")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise ContractError("labels out of range")
        lo, hi = self.domain_box[:, 0], self.domain_box[:, 1]
        if np.any(self.features < lo) or np.any(self.features > hi):
            raise ContractError("features outside the domain box")
        if not set(np.unique(self.splits)) <= set(SPLITS):
            raise ContractError(f"unknown split tags {set(np.unique(self.splits)) - set(SPLITS)}")

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def domain(self):
        """``(lower, upper)`` bounds suitable for ``np.clip``."""
        return self.domain_box[:, 0], self.domain_box[:, 1]

    def split(self, name):
        mask = self.splits == name
        return self.features[mask], self.labels[mask]


def _split_tags(n, rng):
    order = rng.permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    tags = np.empty(n, dtype="<U5")
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    return tags


def _moon_curves(m=2000):
    t = np.linspace(0.0, np.pi, m)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return outer, inner


MOON_SCALE = 1.5
MOON_SHIFT = np.array([-0.5, -0.25])


def moon_gap():
    """Minimum distance between the two noise-free moon arcs after scaling."""
    outer, inner = _moon_curves()
    d = np.linalg.norm(outer[:, None, :] - inner[None, :, :], axis=-1)
    return float(d.min() * MOON_SCALE)


def gen_dataset(kind, n, noise, C=None, seed=0, radius=1.5, dim=2):
    """Deterministic dataset split 70/15/15.

    ``gaussian_blobs`` puts ``C`` centres on a circle of ``radius`` with
    within-class std ``noise``; its margin is ``chord - 4 * noise``.
    ``two_moons`` has two classes; its margin is the arc gap minus
    ``4 * noise * scale``.  With ``dim > 2`` the planar layout is placed in
    a random plane of ``R^dim`` and the noise is isotropic in all
    coordinates; margins are unchanged.
    """
    if kind == "gaussian_blobs":
        C = 3 if C is None else C
    elif kind == "two_moons":
        if C not in (None, 2):
            raise ConfigError("two_moons has exactly two classes")
        C = 2
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if dim < 2:
        raise ConfigError("dim must be at least 2")
    if C < 2 or n < 10 * C:
        raise ContractError(f"need C >= 2 and n >= 10*C, got n={n}, C={C}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % C
    rng.shuffle(labels)
    if kind == "gaussian_blobs":
        angles = 2 * np.pi * np.arange(C) / C
        centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        X = centers[labels] + noise * rng.standard_normal((n, 2))
        margin = 2 * radius * np.sin(np.pi / C) - 4 * noise
    else:
        t = rng.uniform(0.0, np.pi, size=n)
        base = np.where(
            (labels == 0)[:, None],
            np.stack([np.cos(t), np.sin(t)], axis=1),
            np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
        )
        X = MOON_SCALE * (base + MOON_SHIFT) + noise * MOON_SCALE * rng.standard_normal((n, 2))
        margin = moon_gap() - 4 * noise * MOON_SCALE
    if dim > 2:
        extra = noise * rng.standard_normal((n, dim - 2))
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        X = np.concatenate([X, extra], axis=1) @ Q.T
    X = np.clip(X, *DOMAIN)
    return Dataset(
        features=X, labels=labels, domain_box=np.tile(DOMAIN, (dim, 1)),
        splits=_split_tags(n, rng), n_classes=C,
        provenance={"generator": kind, "seed": int(seed), "n": int(n), "noise": float(noise),
                    "dim": int(dim)},
        margin=float(margin),
    )


def load_csv_dataset(path, n_classes=None, seed=0, domain=DOMAIN):
    """Rows of ``label, f1, ..., fl``; an optional header row is skipped."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise ConfigError(f"{path}: non-numeric row {row}") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    arr = np.array(rows)
    labels = arr[:, 0].astype(int)
    X = arr[:, 1:]
    C = int(labels.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(seed)
    return Dataset(
        features=X, labels=labels, domain_box=np.tile(domain, (X.shape[1], 1)),
        splits=_split_tags(len(X), rng), n_classes=C,
        provenance={"generator": "csv", "path": str(path), "seed": int(seed)},
    )
