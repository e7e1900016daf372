"""Data sources: a synthetic halfspace family with an analytically certified
margin, a binary-MNIST loader, and a plain-text dataset format.

The halfspace construction samples x uniformly on the unit sphere conditioned
on |u_star . x| >= gamma0 with label y = sign(u_star . x). With the constant
feature map psi(z) = u_star, the dropout-tangent margin

    E_{z,b}[ y <psi(z), b x 1{z.x >= 0}> ] = q * y * (u_star . x) / 2

is exactly q * gamma0 / 2 in the worst case, which makes the margin parameter
of every bound computable in closed form.
"""

from __future__ import annotations

import struct
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Example:
    """One labeled point: x on the unit sphere, y in {+1, -1}."""

    x: np.ndarray
    y: float


class Dataset(Sequence):
    """Immutable list of examples stored as dense arrays.

    X has shape (n, d) with unit-norm rows; y has shape (n,) with entries +-1.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, meta: dict | None = None):
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("X must be (n, d) and y must be (n,)")
        norms = np.linalg.norm(X, axis=1)
        if X.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("examples must have unit norm within 1e-12")
        if not np.all(np.abs(y) == 1.0):
            raise ValueError("labels must be +1 or -1")
        self.X = X
        self.y = y
        self.meta = dict(meta or {})

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.X[i], self.y[i], self.meta)
        return Example(self.X[i], float(self.y[i]))

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class MarginSpec:
    """Description of a data source together with its margin certificate.

    kind is "halfspace" (u_star, gamma0 required; margin certified in closed
    form) or "mnist-binary" (margin only estimable; psi comes from a linear
    fit and is heuristic). psi maps a batch of gaussian draws (n, d) to
    feature rows with norm <= 1; when None, the constant map z -> u_star is
    used.
    """

    kind: str
    q: float
    u_star: np.ndarray | None = None
    gamma0: float | None = None
    psi: Callable[[np.ndarray], np.ndarray] | None = None
    holdout: Dataset | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("halfspace", "mnist-binary"):
            raise ValueError(f"unknown data kind: {self.kind!r}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"keep-probability q must lie in [0, 1], got {self.q}")
        if self.kind == "halfspace":
            if self.u_star is None or self.gamma0 is None:
                raise ValueError("halfspace spec needs u_star and gamma0")
            self.u_star = np.asarray(self.u_star, dtype=np.float64)
            n = np.linalg.norm(self.u_star)
            if abs(n - 1.0) > 1e-9:
                raise ValueError("u_star must be a unit vector")
            if not 0.0 < self.gamma0 <= 0.999:
                raise ValueError(
                    "gamma0 must lie in (0, 0.999]; larger values empty the "
                    "rejection region"
                )

    @property
    def d(self) -> int:
        if self.u_star is not None:
            return self.u_star.shape[0]
        if self.holdout is not None:
            return self.holdout.d
        raise ValueError("spec carries no dimension")

    def psi_map(self, Z: np.ndarray) -> np.ndarray:
        """Feature rows psi(z) for a batch Z of shape (n, d)."""
        if self.psi is not None:
            return np.asarray(self.psi(Z), dtype=np.float64)
        if self.u_star is None:
            raise ValueError("spec has neither psi nor u_star")
        return np.broadcast_to(self.u_star, Z.shape)


def halfspace_spec(u_star: np.ndarray, gamma0: float, q: float) -> MarginSpec:
    u = np.asarray(u_star, dtype=np.float64)
    u = u / np.linalg.norm(u)
    return MarginSpec(kind="halfspace", q=q, u_star=u, gamma0=gamma0)


def _unit_sphere(rng: RngStream, n: int, d: int) -> np.ndarray:
    X = rng.gen.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X


def sample_halfspace(rng: RngStream, spec: MarginSpec, n: int) -> Dataset:
    """Rejection-sample n examples of the certified halfspace distribution.

    Uniform on the sphere conditioned on |u_star . x| >= gamma0; dimension
    agnostic and exact. The returned meta dict reports raw trial counts so
    the acceptance rate can be audited.
    """
    if spec.kind != "halfspace":
        raise ValueError("sample_halfspace requires a halfspace spec")
    if n < 0:
        raise ValueError("n must be non-negative")
    rows, labels = [], []
    trials = 0
    got = 0
    batch = max(64, 2 * n)
    while got < n:
        X = _unit_sphere(rng, batch, spec.d)
        proj = X @ spec.u_star
        keep = np.abs(proj) >= spec.gamma0
        trials += batch
        X, proj = X[keep], proj[keep]
        rows.append(X)
        labels.append(np.sign(proj))
        got += X.shape[0]
    X = np.concatenate(rows)[:n]
    y = np.concatenate(labels)[:n]
    return Dataset(X, y, meta={"trials": trials, "accepted_before_cut": got})


def halfspace_stream(rng: RngStream, spec: MarginSpec, batch: int = 512):
    """Endless i.i.d. example stream for online training."""
    while True:
        ds = sample_halfspace(rng, spec, batch)
        for i in range(len(ds)):
            yield ds[i]


def finite_stream(rng: RngStream, dataset: Dataset, reshuffle: bool = True):
    """Shuffled pass(es) over a finite dataset.

    Repeats with a fresh shuffle per epoch when reshuffle is set; repeated
    visits fall outside the one-pass online setting the bounds assume.
    """
    n = len(dataset)
    if n == 0:
        return
    while True:
        order = rng.gen.permutation(n)
        for i in order:
            yield dataset[int(i)]
        if not reshuffle:
            return


def certified_margin(spec: MarginSpec) -> float:
    """Closed-form margin q * gamma0 / 2 of the halfspace construction."""
    if spec.kind != "halfspace":
        raise ValueError(
            "certified margin exists only for halfspace specs; use "
            "estimate_margin for other data"
        )
    return spec.q * spec.gamma0 / 2.0


@dataclass(frozen=True)
class MarginEstimate:
    value: float
    se: float
    argmin: int


def estimate_margin(
    rng: RngStream, spec: MarginSpec, examples: Dataset, n_mc: int
) -> MarginEstimate:
    """Monte Carlo estimate of min_x E_{z,b}[ y <psi(z), b x 1{z.x >= 0}> ].

    Fresh z ~ N(0, I_d) and b ~ Bern(q) draws per example; returns the
    minimum per-example mean together with its standard error.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if len(examples) == 0:
        raise ValueError("estimate_margin needs at least one example")
    d = examples.d
    best = (np.inf, 0.0, -1)
    for i in range(len(examples)):
        x = examples.X[i]
        y = examples.y[i]
        Z = rng.gen.standard_normal((n_mc, d))
        b = (rng.gen.random(n_mc) < spec.q).astype(np.float64)
        feats = spec.psi_map(Z)
        vals = y * (feats @ x) * b * (Z @ x >= 0.0)
        mean = float(np.mean(vals))
        if mean < best[0]:
            se = float(np.std(vals, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
            best = (mean, se, i)
    return MarginEstimate(value=best[0], se=best[1], argmin=best[2])


def _open_idx(path):
    path = str(path)
    if path.endswith(".gz"):
        import gzip

        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, nbytes: int, path: str):
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise ValueError(
            f"{path}: truncated IDX file at byte offset {f.tell() - len(buf)}"
            f" (wanted {nbytes} more bytes, got {len(buf)})"
        )
    return buf


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX image file (big-endian, magic 0x00000803) to (n, r, c)."""
    path = str(path)
    with _open_idx(path) as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, path))
        if magic != _IDX_IMAGES_MAGIC:
            raise ValueError(
                f"{path}: bad IDX image magic 0x{magic:08x} at byte offset 0 "
                f"(expected 0x{_IDX_IMAGES_MAGIC:08x})"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, path))
        raw = _read_exact(f, n * rows * cols, path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    """Parse an IDX label file (big-endian, magic 0x00000801) to (n,)."""
    path = str(path)
    with _open_idx(path) as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, path))
        if magic != _IDX_LABELS_MAGIC:
            raise ValueError(
                f"{path}: bad IDX label magic 0x{magic:08x} at byte offset 0 "
                f"(expected 0x{_IDX_LABELS_MAGIC:08x})"
            )
        n, = struct.unpack(">I", _read_exact(f, 4, path))
        raw = _read_exact(f, n, path)
    return np.frombuffer(raw, dtype=np.uint8)


def _resolve_idx_pair(directory, split: str):
    from pathlib import Path

    base = Path(directory)
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}.get(split)
    if prefix is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    pair = []
    for stem in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        for cand in (base / stem, base / (stem + ".gz")):
            if cand.exists():
                pair.append(cand)
                break
        else:
            raise FileNotFoundError(f"{base}: missing IDX file {stem}[.gz]")
    return pair


def load_mnist_binary(path, digit_pos: int, digit_neg: int, split: str = "train") -> Dataset:
    """Two-digit MNIST subset, flattened and scaled to the unit sphere.

    path is a directory holding the standard IDX files (optionally gzipped);
    digit_pos maps to +1 and digit_neg to -1; order follows the files.
    All-zero images cannot be normalized and are skipped with a warning.
    """
    if digit_pos == digit_neg:
        raise ValueError("digit_pos and digit_neg must differ")
    images_path, labels_path = _resolve_idx_pair(path, split)
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    keep = (labels == digit_pos) | (labels == digit_neg)
    X = images[keep].reshape(np.count_nonzero(keep), -1).astype(np.float64)
    y = np.where(labels[keep] == digit_pos, 1.0, -1.0)
    norms = np.linalg.norm(X, axis=1)
    nz = norms > 0.0
    if not np.all(nz):
        warnings.warn(
            f"skipping {np.count_nonzero(~nz)} all-zero image(s): cannot normalize",
            stacklevel=2,
        )
        X, y, norms = X[nz], y[nz], norms[nz]
    X /= norms[:, None]
    return Dataset(X, y, meta={"digit_pos": digit_pos, "digit_neg": digit_neg})


def save_dataset_text(path, dataset: Dataset) -> None:
    """Write `y x_1 ... x_d` per line, 17 significant digits (lossless)."""
    with open(path, "w") as f:
        for i in range(len(dataset)):
            coords = " ".join(f"{v:.17g}" for v in dataset.X[i])
            f.write(f"{int(dataset.y[i]):+d} {coords}\n")


def load_dataset_text(path) -> Dataset:
    rows, labels = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                labels.append(float(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: malformed example line") from e
    return Dataset(np.asarray(rows), np.asarray(labels))
