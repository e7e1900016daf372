"""One-pass online dropout SGD with per-row max-norm projection.

Each iteration draws a fresh example and a fresh Bernoulli mask, takes one
SGD step on the masked sub-network's logistic loss, and projects every hidden
row onto the ball of radius c. The loop runs T-1 updates; the T-th example
and mask are consumed for diagnostics only, so that averages over t = 1..T
are well defined. On exit the weights are rescaled by q (standard variant;
the inverted variant scales masks by 1/q during training instead and skips
the final rescale).

Alongside the iterate stream the trainer keeps a full per-step scalar log
(losses, drift, activation flips, projection hits, and, when a competitor
U = W_1 + lambda*V is attached, the linearized losses and distance
telescoping needed by the verification suite).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DropoutMask, NetworkParams, save_checkpoint
from .numerics import LN2, RngStream, STREAM_MASKS, logistic_loss, logistic_neg_deriv

_VARIANTS = ("standard", "inverted")

# Accumulated f64 rounding allowance for the per-step distance telescoping
# and the averaged regret inequality (values are O(1)..O(1e3) over <= 1e5
# steps, so 1e-9 absolute is generous).
REGRET_TOL = 1e-9


@dataclass
class TrainConfig:
    """Parameters of one training run."""

    m: int
    d: int
    q: float
    eta: float
    c: float
    T: int
    seed: int
    variant: str = "standard"
    snapshot_stride: int | None = None

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be >= 1")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.c <= 0.0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}, got {self.variant!r}")
        if self.snapshot_stride is None:
            self.snapshot_stride = max(1, self.T // 200)
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")


@dataclass
class IterateRecord:
    """Diagnostics of one recorded iteration, all evaluated at W_t before the
    update (projection_hits counts rows clipped by the step-t projection)."""

    t: int
    inst_loss: float
    q_value: float
    sub_output: float
    full_output: float
    max_drift: float
    flip_count: int
    active_neurons: int
    projection_hits: int
    lemma1_slack: float | None = None
    lemma2_linloss: float | None = None


CSV_COLUMNS = (
    "t",
    "inst_loss",
    "q_value",
    "sub_output",
    "full_output",
    "max_drift",
    "flip_count",
    "active_neurons",
    "projection_hits",
    "lemma1_slack",
    "lemma2_linloss",
)


@dataclass
class TrajectoryLog:
    """Per-step scalar trajectory of a full run (arrays of length T)."""

    inst_loss: np.ndarray
    q_value: np.ndarray
    sub_output: np.ndarray
    full_output: np.ndarray
    max_drift: np.ndarray
    flip_count: np.ndarray
    active_neurons: np.ndarray
    projection_hits: np.ndarray
    linloss_U: np.ndarray | None = None
    margin_V: np.ndarray | None = None
    init_output: np.ndarray | None = None
    dist1_sq: float | None = None
    telescope_min_slack: float | None = None

    @property
    def T(self) -> int:
        return self.inst_loss.shape[0]

    def regret_sides(self, eta: float) -> tuple[float, float]:
        """(lhs, rhs) of the averaged regret inequality over all T steps."""
        if self.linloss_U is None or self.dist1_sq is None:
            raise ValueError("run was trained without a competitor attached")
        lhs = float(np.mean(self.inst_loss))
        rhs = self.dist1_sq / (eta * self.T) + 2.0 * float(np.mean(self.linloss_U))
        return lhs, rhs


@dataclass
class Snapshot:
    t: int
    W: np.ndarray
    mask_bits: np.ndarray


@dataclass
class RunResult:
    config: TrainConfig
    params_init: NetworkParams
    final: NetworkParams
    rescaled: NetworkParams
    log: TrajectoryLog
    records: list[IterateRecord]
    snapshots: list[Snapshot] = field(default_factory=list)
    competitor: object | None = None


def project_maxnorm(W: np.ndarray, c: float) -> np.ndarray:
    """Project every row of W onto the Euclidean ball of radius c.

    Compliant rows are returned bit-identical; clipped rows are rescaled
    (repeating on the rare 1-ulp overshoot) until the summed-squares row
    norm is <= c, which makes the projection exactly idempotent.
    """
    if c <= 0.0:
        raise ValueError(f"radius must be positive, got {c}")
    W = np.array(W, dtype=np.float64, copy=True)
    _project_rows_inplace(W, c, np.arange(W.shape[0]))
    return W


def _project_rows_inplace(W: np.ndarray, c: float, rows: np.ndarray) -> int:
    """Clip the given rows to norm <= c in place; returns how many were hit.

    A single rescale can overshoot c by an ulp, or stall entirely when the
    norm is within an ulp of c (c/n rounds to 1); follow-up passes apply a
    slightly stronger factor so progress is geometric and the final norms
    are <= c exactly.
    """
    if rows.size == 0:
        return 0
    sub = W[rows]
    norms_sq = np.einsum("ij,ij->i", sub, sub)
    offenders = rows[norms_sq > c * c]
    hits = offenders.size
    shrink = 1.0
    while offenders.size:
        norms = np.sqrt(np.einsum("ij,ij->i", W[offenders], W[offenders]))
        W[offenders] *= (shrink * (c / norms))[:, None]
        norms_sq = np.einsum("ij,ij->i", W[offenders], W[offenders])
        offenders = offenders[norms_sq > c * c]
        shrink = 1.0 - 2.0**-50
    return hits


def _mask_bits(rng: RngStream, m: int, q: float) -> np.ndarray:
    return (rng.gen.random(m) < q).astype(np.float64)


class _StepState:
    """Everything one iteration computes at W_t before updating."""

    __slots__ = (
        "x", "y", "bits", "z", "act", "g", "loss", "q_value", "full_out",
        "coef",
    )


def _evaluate(W, a, x, y, bits, mask_scale, out_scale, inv_sqrt_m):
    s = _StepState()
    s.x, s.y, s.bits = x, y, bits
    s.z = W @ x
    s.act = s.z >= 0.0
    relu_z = np.where(s.act, s.z, 0.0)
    weights = a * (bits * mask_scale) * inv_sqrt_m
    s.g = float(weights @ relu_z)
    margin = y * s.g
    s.loss = float(logistic_loss(margin))
    s.q_value = float(logistic_neg_deriv(margin))
    s.full_out = y * out_scale * float(a @ relu_z) * inv_sqrt_m
    s.coef = weights * s.act
    return s


def _apply_update(W, s, eta: float, c: float, project_all: bool) -> int:
    """W <- Pi_c(W - eta * grad L_t(W)); returns projection hit count.

    grad L_t = l'(y g) * y * grad g, and -l' = q_value, so the update adds
    eta * q_value * y * outer(coef, x). The gradient norm obeys
    ||eta grad L||_F = eta * q_value * ||coef|| <= eta * q_value.
    """
    step = eta * s.q_value * s.y
    touched = np.nonzero(s.coef)[0]
    if touched.size:
        W[touched] += (step * s.coef[touched])[:, None] * s.x
    rows = np.arange(W.shape[0]) if project_all else touched
    return _project_rows_inplace(W, c, rows)


def dropout_step(
    params: NetworkParams,
    example,
    mask: DropoutMask,
    eta: float,
    c: float,
    t: int = 1,
    params_init: NetworkParams | None = None,
) -> tuple[NetworkParams, IterateRecord]:
    """One dropout iteration on a copy of params (standard variant).

    Drift and flip diagnostics are filled when params_init is supplied,
    otherwise they refer to params itself (zero for an un-trained net).
    """
    if mask.m != params.m:
        raise ValueError(f"mask length {mask.m} does not match width {params.m}")
    x = np.asarray(example.x, dtype=np.float64)
    if x.shape != (params.d,):
        raise ValueError(f"input has shape {x.shape}, expected ({params.d},)")
    if eta <= 0.0 or c <= 0.0:
        raise ValueError("eta and c must be positive")
    ref = params_init if params_init is not None else params
    if ref.W.shape != params.W.shape:
        raise ValueError("params_init shape does not match params")
    inv_sqrt_m = 1.0 / math.sqrt(params.m)
    s = _evaluate(params.W, params.a, x, float(example.y), mask.b, 1.0, mask.q, inv_sqrt_m)
    diff = params.W - ref.W
    drift = float(np.sqrt(np.max(np.einsum("ij,ij->i", diff, diff))))
    flips = int(np.count_nonzero(s.act != (ref.W @ x >= 0.0)))
    out = params.copy()
    hits = _apply_update(out.W, s, eta, c, project_all=True)
    record = IterateRecord(
        t=t,
        inst_loss=s.loss,
        q_value=s.q_value,
        sub_output=s.y * s.g,
        full_output=s.full_out,
        max_drift=drift,
        flip_count=flips,
        active_neurons=int(np.count_nonzero(mask.b)),
        projection_hits=hits,
    )
    return out, record


def train(
    config: TrainConfig,
    data,
    competitor=None,
    store_snapshots: bool = True,
    checkpoint_dir=None,
    checkpoint_stride: int | None = None,
    params_init: NetworkParams | None = None,
    init_rng: RngStream | None = None,
) -> RunResult:
    """Run the full dropout loop and record the trajectory.

    data must yield at least T examples (the T-th is consumed for
    diagnostics only). Masks come from the config's own mask stream, so a
    run is fully determined by (config, data). A competitor (attributes U,
    V, lam, gamma) switches on the per-step linearized-loss and distance
    accounting used by the verification suite; it requires the standard
    variant.
    """
    from .model import init_network  # local import to avoid cycle at module load

    if competitor is not None and config.variant != "standard":
        raise ValueError("competitor accounting is defined for the standard variant only")
    if params_init is None:
        rng = init_rng if init_rng is not None else RngStream(config.seed, 0)
        params_init = init_network(rng, config.m, config.d)
    if params_init.W.shape != (config.m, config.d):
        raise ValueError("params_init does not match config dimensions")

    m, d, T = config.m, config.d, config.T
    inv_sqrt_m = 1.0 / math.sqrt(m)
    mask_scale = 1.0 if config.variant == "standard" else 1.0 / config.q
    out_scale = config.q if config.variant == "standard" else 1.0
    mask_rng = RngStream(config.seed, STREAM_MASKS)
    stride = config.snapshot_stride

    W = params_init.W.copy()
    W1 = params_init.W
    a = params_init.a

    with_theory = competitor is not None
    if with_theory:
        U = np.asarray(competitor.U, dtype=np.float64)
        V = np.asarray(competitor.V, dtype=np.float64)
        if U.shape != (m, d) or V.shape != (m, d):
            raise ValueError("competitor matrices do not match network shape")
        diff0 = W - U
        dist_sq = float(np.einsum("ij,ij->", diff0, diff0))
        dist1_sq = dist_sq
        telescope_min = math.inf

    cols = {
        name: np.empty(T, dtype=np.float64)
        for name in ("inst_loss", "q_value", "sub_output", "full_output", "max_drift")
    }
    icols = {
        name: np.empty(T, dtype=np.int64)
        for name in ("flip_count", "active_neurons", "projection_hits")
    }
    if with_theory:
        linloss_U = np.empty(T, dtype=np.float64)
        margin_V = np.empty(T, dtype=np.float64)
        init_output = np.empty(T, dtype=np.float64)

    snapshots: list[Snapshot] = []
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        if checkpoint_stride is None:
            checkpoint_stride = stride

    stream = iter(data)
    buf = np.empty_like(W)
    for t in range(1, T + 1):
        try:
            example = next(stream)
        except StopIteration:
            raise RuntimeError(
                f"data stream exhausted at iteration {t} of {T}"
            ) from None
        x = np.asarray(example.x, dtype=np.float64)
        y = float(example.y)
        bits = _mask_bits(mask_rng, m, config.q)
        s = _evaluate(W, a, x, y, bits, mask_scale, out_scale, inv_sqrt_m)

        z1 = W1 @ x
        act1 = z1 >= 0.0
        flips = int(np.count_nonzero(s.act != act1))
        np.subtract(W, W1, out=buf)
        drift = math.sqrt(float(np.max(np.einsum("ij,ij->i", buf, buf))))

        if with_theory:
            weights = a * bits * inv_sqrt_m
            lin_u = float(s.coef @ (U @ x))
            lt_u = float(logistic_loss(y * lin_u))
            linloss_U[t - 1] = lt_u
            margin_V[t - 1] = y * float((weights * act1) @ (V @ x))
            init_output[t - 1] = float(weights @ np.where(act1, z1, 0.0))

        cols["inst_loss"][t - 1] = s.loss
        cols["q_value"][t - 1] = s.q_value
        cols["sub_output"][t - 1] = y * s.g
        cols["full_output"][t - 1] = s.full_out
        cols["max_drift"][t - 1] = drift
        icols["flip_count"][t - 1] = flips
        icols["active_neurons"][t - 1] = int(np.count_nonzero(bits))

        # snapshots and checkpoints capture W_t, the state the step-t
        # diagnostics refer to, so they are taken before the update
        recorded = (t - 1) % stride == 0 or t == T
        if recorded and store_snapshots:
            snapshots.append(Snapshot(t=t, W=W.copy(), mask_bits=bits))
        if checkpoint_dir is not None and ((t - 1) % checkpoint_stride == 0 or t == T):
            save_checkpoint(
                checkpoint_dir / f"ckpt_t{t:08d}.bin",
                NetworkParams(W, a), q=config.q, iteration=t,
            )

        hits = 0
        if t < T:
            hits = _apply_update(W, s, config.eta, config.c, project_all=(t == 1))
            if with_theory:
                np.subtract(W, U, out=buf)
                dist_sq_next = float(np.einsum("ij,ij->", buf, buf))
                slack = (dist_sq - config.eta * s.loss + 2.0 * config.eta * lt_u) - dist_sq_next
                if slack < telescope_min:
                    telescope_min = slack
                dist_sq = dist_sq_next
        icols["projection_hits"][t - 1] = hits

    log = TrajectoryLog(
        inst_loss=cols["inst_loss"],
        q_value=cols["q_value"],
        sub_output=cols["sub_output"],
        full_output=cols["full_output"],
        max_drift=cols["max_drift"],
        flip_count=icols["flip_count"],
        active_neurons=icols["active_neurons"],
        projection_hits=icols["projection_hits"],
        linloss_U=linloss_U if with_theory else None,
        margin_V=margin_V if with_theory else None,
        init_output=init_output if with_theory else None,
        dist1_sq=dist1_sq if with_theory else None,
        telescope_min_slack=(telescope_min if with_theory and T > 1 else None),
    )

    final = NetworkParams(W, a.copy())
    rescaled = final.scaled(config.q) if config.variant == "standard" else final.copy()
    records = _build_records(config, log)
    return RunResult(
        config=config,
        params_init=params_init,
        final=final,
        rescaled=rescaled,
        log=log,
        records=records,
        snapshots=snapshots,
        competitor=competitor,
    )


def recorded_steps(config: TrainConfig) -> list[int]:
    """Iterations whose diagnostics are recorded: 1, 1+stride, ... plus T."""
    ts = list(range(1, config.T + 1, config.snapshot_stride))
    if ts[-1] != config.T:
        ts.append(config.T)
    return ts


def _build_records(config: TrainConfig, log: TrajectoryLog) -> list[IterateRecord]:
    with_theory = log.linloss_U is not None
    if with_theory:
        cum_loss = np.cumsum(log.inst_loss)
        cum_lin = np.cumsum(log.linloss_U)
    out = []
    for t in recorded_steps(config):
        i = t - 1
        slack = None
        linloss = None
        if with_theory:
            # prefix regret slack: rhs(t) - lhs(t) of the averaged inequality
            lhs = cum_loss[i] / t
            rhs = log.dist1_sq / (config.eta * t) + 2.0 * cum_lin[i] / t
            slack = rhs - lhs
            linloss = float(log.linloss_U[i])
        out.append(
            IterateRecord(
                t=t,
                inst_loss=float(log.inst_loss[i]),
                q_value=float(log.q_value[i]),
                sub_output=float(log.sub_output[i]),
                full_output=float(log.full_output[i]),
                max_drift=float(log.max_drift[i]),
                flip_count=int(log.flip_count[i]),
                active_neurons=int(log.active_neurons[i]),
                projection_hits=int(log.projection_hits[i]),
                lemma1_slack=slack,
                lemma2_linloss=linloss,
            )
        )
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_rows(records: list[IterateRecord]):
    """CSV rows (header first) for the metrics stream."""
    yield ",".join(CSV_COLUMNS)
    for r in records:
        yield ",".join(_fmt(getattr(r, name)) for name in CSV_COLUMNS)


def write_metrics_csv(path, records: list[IterateRecord]) -> None:
    with open(path, "w", newline="") as f:
        for row in metrics_rows(records):
            f.write(row + "\n")
