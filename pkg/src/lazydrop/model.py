"""Two-layer ReLU network with fixed random signs on the output layer.

The full network is f(x; W) = (1/sqrt(m)) * sum_r a_r * relu(w_r . x) and a
Bernoulli mask b selects the sub-network g(W; x, b) that a dropout step
actually updates. Because relu is positively homogeneous, <grad g(W), W> =
g(W) exactly, an identity the verification suite leans on throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream


@dataclass
class NetworkParams:
    """Hidden weights W (m x d) and fixed output signs a in {+1, -1}^m."""

    W: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.W.ndim != 2 or self.a.shape != (self.W.shape[0],):
            raise ValueError("W must be (m, d) with one sign per row")
        if not np.all(np.abs(self.a) == 1.0):
            raise ValueError("output signs must be exactly +1 or -1")

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.W.copy(), self.a.copy())

    def scaled(self, factor: float) -> "NetworkParams":
        return NetworkParams(self.W * factor, self.a.copy())

    def max_row_norm(self) -> float:
        return float(np.sqrt(np.max(np.einsum("ij,ij->i", self.W, self.W))))


@dataclass
class DropoutMask:
    """Bernoulli keep pattern b in {0,1}^m sampled with keep-probability q."""

    b: np.ndarray
    q: float

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.ndim != 1 or not np.all((self.b == 0.0) | (self.b == 1.0)):
            raise ValueError("mask entries must be 0 or 1")

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @property
    def active(self) -> int:
        return int(np.count_nonzero(self.b))


def init_network(rng: RngStream, m: int, d: int) -> NetworkParams:
    """Rows i.i.d. N(0, I_d), signs i.i.d. uniform; deterministic per stream."""
    if m < 1 or d < 1:
        raise ValueError(f"width and dimension must be >= 1, got m={m}, d={d}")
    W = rng.gen.standard_normal((m, d))
    a = rng.gen.integers(0, 2, size=m).astype(np.float64) * 2.0 - 1.0
    return NetworkParams(W, a)


def init_row_norm_bound(m: int, d: int) -> float:
    """sqrt(d) + 2*sqrt(ln m): holds for all rows w.p. >= 1 - 1/m."""
    return float(np.sqrt(d) + 2.0 * np.sqrt(np.log(m)))


def init_network_conditioned(
    rng: RngStream, m: int, d: int, row_norm_bound: float | None = None
) -> NetworkParams:
    """Re-initialize until every row norm is within the stated bound.

    The bound defaults to sqrt(d) + 2*sqrt(ln m), which is what the analysis
    objects require of the initial rows; a redraw is a <= 1/m event.
    """
    bound = init_row_norm_bound(m, d) if row_norm_bound is None else row_norm_bound
    while True:
        params = init_network(rng, m, d)
        if params.max_row_norm() <= bound:
            return params


def _check_input(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d,):
        raise ValueError(f"input has shape {x.shape}, expected ({params.d},)")
    return x


def _check_mask(params: NetworkParams, mask: DropoutMask) -> None:
    if mask.m != params.m:
        raise ValueError(f"mask length {mask.m} does not match width {params.m}")


def forward_full(params: NetworkParams, x: np.ndarray) -> float:
    """(1/sqrt(m)) * a . relu(W x)."""
    x = _check_input(params, x)
    z = params.W @ x
    return float(params.a @ np.maximum(z, 0.0) / np.sqrt(params.m))


def forward_sub(params: NetworkParams, mask: DropoutMask, x: np.ndarray) -> float:
    """(1/sqrt(m)) * a . (b * relu(W x)): the masked sub-network output."""
    x = _check_input(params, x)
    _check_mask(params, mask)
    z = params.W @ x
    return float((params.a * mask.b) @ np.maximum(z, 0.0) / np.sqrt(params.m))


def grad_sub(params: NetworkParams, mask: DropoutMask, x: np.ndarray) -> np.ndarray:
    """Gradient of forward_sub in W: row r is (1/sqrt(m)) a_r b_r 1{w_r.x >= 0} x.

    The subgradient at the relu kink is taken as active (>= 0), which makes
    <grad, W> equal the output exactly. Frobenius norm is at most 1.
    """
    x = _check_input(params, x)
    _check_mask(params, mask)
    z = params.W @ x
    coef = params.a * mask.b * (z >= 0.0) / np.sqrt(params.m)
    return np.outer(coef, x)


def forward_full_batch(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    """Full-network outputs for X of shape (n, d)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise ValueError(f"batch has shape {X.shape}, expected (n, {params.d})")
    H = np.maximum(X @ params.W.T, 0.0)
    return H @ params.a / np.sqrt(params.m)

def forward_sub_batch(params: NetworkParams, mask: DropoutMask, X: np.ndarray) -> np.ndarray:
    """Sub-network outputs for X of shape (n, d)."""
    _check_mask(params, mask)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise ValueError(f"batch has shape {X.shape}, expected (n, {params.d})")
    H = np.maximum(X @ params.W.T, 0.0)
    return H @ (params.a * mask.b) / np.sqrt(params.m)


def sample_mask(rng: RngStream, m: int, q: float) -> DropoutMask:
    """m independent Bernoulli(q) keep bits."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"keep-probability must lie in [0, 1], got {q}")
    return DropoutMask((rng.gen.random(m) < q).astype(np.float64), q)


_CKPT_HEADER = struct.Struct("<IIdQ")


def save_checkpoint(path, params: NetworkParams, q: float, iteration: int) -> None:
    """Binary checkpoint: header (m, d, q, t), signs as int8, W as little-endian f64."""
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(params.m, params.d, q, iteration))
        f.write(params.a.astype(np.int8).tobytes())
        f.write(params.W.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path) -> tuple[NetworkParams, float, int]:
    with open(path, "rb") as f:
        header = f.read(_CKPT_HEADER.size)
        if len(header) != _CKPT_HEADER.size:
            raise ValueError(f"{path}: truncated checkpoint header")
        m, d, q, iteration = _CKPT_HEADER.unpack(header)
        a = np.frombuffer(f.read(m), dtype=np.int8).astype(np.float64)
        W = np.frombuffer(f.read(m * d * 8), dtype="<f8").reshape(m, d).copy()
        if a.shape[0] != m or W.shape != (m, d):
            raise ValueError(f"{path}: truncated checkpoint body")
    return NetworkParams(W, a), q, iteration
