"""Analysis objects and empirical verification of the convergence claims.

The competitor U = W_1 + lambda*V interpolates between the initialization and
the max-margin direction V (row r equals a_r * psi(w_{r,1}) / sqrt(m), so
||V||_F <= 1). The bound calculator derives, from a margin gamma and the run
shape (eta, T, m, d, delta):

    c      = sqrt(d) + max(1/(14 gamma^2), 2 sqrt(ln m)) + 1
    lambda = 5/gamma * ln(2 eta T) + sqrt(44/gamma^2 * ln(24 eta c sqrt(m) T^2))
    m_req  = 2401 * gamma^-6 * lambda^2
    full-network risk bound      4 lambda^2 / (eta T)
    sub-network risk bound       12 lambda^2 / (eta T) + 6 ln(1/delta) / T
    worst-case linearized loss   c sqrt(m) / ln 2 + 1

verify_lemmas replays a recorded run against every per-iterate guarantee:
the deterministic regret inequality, the drift and activation-flip bounds,
the initial-output and margin concentration bounds, the linearized-loss
bounds, and the active-width bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, MarginSpec, certified_margin, sample_halfspace
from .model import DropoutMask, NetworkParams, forward_full_batch, forward_sub_batch, grad_sub
from .numerics import LN2, RngStream, logistic_loss
from .trainer import REGRET_TOL, RunResult


@dataclass
class Competitor:
    """Interpolated reference point U = W_1 + lambda * V used by all checks."""

    V: np.ndarray
    lam: float
    U: np.ndarray
    gamma: float

    @property
    def frob_V(self) -> float:
        return float(np.linalg.norm(self.V))


def build_competitor(
    params_init: NetworkParams,
    spec: MarginSpec,
    lam: float,
    gamma: float | None = None,
) -> Competitor:
    """Construct V from the init weights via the spec's feature map psi."""
    if lam < 0.0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    feats = np.asarray(spec.psi_map(params_init.W), dtype=np.float64)
    if feats.shape != params_init.W.shape:
        raise ValueError("psi must map (m, d) rows to (m, d) rows")
    row_norms = np.linalg.norm(feats, axis=1)
    if np.max(row_norms) > 1.0 + 1e-9:
        raise ValueError("feature map must satisfy ||psi(z)|| <= 1 for all rows")
    V = params_init.a[:, None] * feats / np.sqrt(params_init.m)
    fro = float(np.linalg.norm(V))
    if fro > 1.0 + 1e-12:
        raise AssertionError(f"||V||_F = {fro} exceeds 1")
    U = params_init.W + lam * V
    if gamma is None:
        gamma = certified_margin(spec)
    return Competitor(V=V, lam=lam, U=U, gamma=gamma)


@dataclass
class BoundReport:
    gamma: float
    eta: float
    T: int
    m: int
    d: int
    delta: float
    c: float
    lam: float
    m_required: float
    thm1_bound: float
    thm2_bound: float
    worst_case_loss: float
    width_ok: bool
    log_clamped: bool

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "gamma", "eta", "T", "m", "d", "delta", "c", "m_required",
            "thm1_bound", "thm2_bound", "worst_case_loss", "width_ok",
            "log_clamped",
        )}
        out["lambda"] = self.lam
        return out


def compute_bounds(
    gamma: float, eta: float, T: int, m: int, d: int, delta: float = 0.05
) -> BoundReport:
    """Evaluate every bound formula for the given margin and run shape.

    c depends only on gamma, m, d and is computed first; lambda then uses c
    inside its logarithm. For very small eta*T a log argument can dip below
    1 (undefined square root); arguments are clamped at e and the report is
    flagged, since that regime is outside the intended horizon range.
    """
    if gamma <= 0.0:
        raise ValueError(f"margin must be positive, got {gamma}")
    if eta <= 0.0 or T < 1 or m < 1 or d < 1:
        raise ValueError("eta, T, m, d must all be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    c = math.sqrt(d) + max(1.0 / (14.0 * gamma**2), 2.0 * math.sqrt(math.log(m))) + 1.0
    arg1 = 2.0 * eta * T
    arg2 = 24.0 * eta * c * math.sqrt(m) * T * T
    clamped = arg1 < math.e or arg2 < math.e
    lam = (5.0 / gamma) * math.log(max(arg1, math.e)) + math.sqrt(
        (44.0 / gamma**2) * math.log(max(arg2, math.e))
    )
    m_required = 2401.0 * gamma**-6 * lam**2
    thm1 = 4.0 * lam**2 / (eta * T)
    thm2 = 12.0 * lam**2 / (eta * T) + 6.0 * math.log(1.0 / delta) / T
    worst_case = c * math.sqrt(m) / LN2 + 1.0
    return BoundReport(
        gamma=gamma,
        eta=eta,
        T=T,
        m=m,
        d=d,
        delta=delta,
        c=c,
        lam=lam,
        m_required=m_required,
        thm1_bound=thm1,
        thm2_bound=thm2,
        worst_case_loss=worst_case,
        width_ok=m >= m_required,
        log_clamped=clamped,
    )


def linearized_loss(
    params_t: NetworkParams, mask: DropoutMask, example, U: np.ndarray
) -> float:
    """Logistic loss of the tangent-model prediction <grad g(W_t), U>."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape != params_t.W.shape:
        raise ValueError(f"U has shape {U.shape}, expected {params_t.W.shape}")
    G = grad_sub(params_t, mask, np.asarray(example.x, dtype=np.float64))
    return float(logistic_loss(example.y * float(np.sum(G * U))))


def flip_count(params_t: NetworkParams, params_init: NetworkParams, x: np.ndarray) -> int:
    """Hidden units whose activation on x differs between W_t and W_1."""
    if params_t.W.shape != params_init.W.shape:
        raise ValueError("parameter shapes do not match")
    x = np.asarray(x, dtype=np.float64)
    return int(np.count_nonzero((params_t.W @ x >= 0.0) != (params_init.W @ x >= 0.0)))


@dataclass
class LemmaCheck:
    check_id: str
    bound: float
    observed: float
    slack: float
    passed: bool | None
    precondition_ok: bool = True
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "lemma_id": self.check_id,
            "bound": self.bound,
            "observed": self.observed,
            "slack": self.slack,
            "pass": self.passed,
            "precondition_ok": self.precondition_ok,
            "note": self.note,
        }


@dataclass
class LemmaReport:
    checks: list[LemmaCheck]
    delta: float
    width_ok: bool
    meta: dict = field(default_factory=dict)

    def __getitem__(self, check_id: str) -> LemmaCheck:
        for c in self.checks:
            if c.check_id == check_id:
                return c
        raise KeyError(check_id)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks if c.passed is not None)

    def as_dict(self) -> dict:
        return {
            "delta": self.delta,
            "width_ok": self.width_ok,
            "meta": self.meta,
            "checks": [c.as_dict() for c in self.checks],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.as_dict(), **kw)


def verify_lemmas(
    run: RunResult, competitor: Competitor | None = None, delta: float = 0.05
) -> LemmaReport:
    """Check every per-iterate guarantee of a recorded run.

    The run must have been trained with a competitor attached (the per-step
    linearized losses are recorded inside the loop). The regret and
    linearized-loss checks require U to be a fixed point of the projection;
    when some row of U exceeds c they are still valid provided no projection
    fired during the run (the projection was the identity on the visited
    trajectory), and are refused otherwise.
    """
    log = run.log
    if log.linloss_U is None:
        raise ValueError("trajectory carries no competitor diagnostics; train with a competitor")
    comp = competitor if competitor is not None else run.competitor
    if comp is None:
        raise ValueError("no competitor supplied")
    cfg = run.config
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    T, m = cfg.T, cfg.m
    gamma, lam = comp.gamma, comp.lam

    checks: list[LemmaCheck] = []

    def add(check_id, bound, observed, higher_is_bad=True, precondition_ok=True, note=""):
        slack = (bound - observed) if higher_is_bad else (observed - bound)
        checks.append(
            LemmaCheck(
                check_id=check_id,
                bound=float(bound),
                observed=float(observed),
                slack=float(slack),
                passed=bool(slack >= 0.0) if precondition_ok else None,
                precondition_ok=precondition_ok,
                note=note,
            )
        )

    drift_obs = float(np.max(log.max_drift))
    add("drift_bound", 7.0 * lam / (2.0 * gamma * math.sqrt(m)), drift_obs)

    init_req = 25.0 * math.log(6.0 * T / delta)
    add(
        "init_output_bound",
        math.sqrt(2.0 * math.log(6.0 * T / delta)),
        float(np.max(np.abs(log.init_output))),
        precondition_ok=m >= init_req,
        note="" if m >= init_req else f"needs m >= 25 ln(6T/delta) = {init_req:.0f}",
    )

    add(
        "margin_concentration",
        gamma - math.sqrt(2.0 * math.log(3.0 * T / delta) / m),
        float(np.min(log.margin_V)),
        higher_is_bad=False,
    )

    max_lin = float(np.max(log.linloss_U))
    add("linloss_bound", lam**2 / (2.0 * cfg.eta * T), max_lin)
    add("linloss_cap", cfg.c * math.sqrt(m) / LN2 + 1.0, max_lin)

    eta_ok = cfg.eta <= LN2 + 1e-12
    u_norms = np.linalg.norm(comp.U, axis=1)
    u_in_ball = float(np.max(u_norms)) <= cfg.c + 1e-9
    no_projection = int(np.sum(log.projection_hits)) == 0
    regret_ok = eta_ok and (u_in_ball or no_projection)
    if not eta_ok:
        reason = f"eta = {cfg.eta} exceeds ln 2"
    elif not regret_ok:
        reason = (
            "competitor rows exceed the projection radius and the projection "
            "fired during the run"
        )
    else:
        reason = ""
    lhs, rhs = log.regret_sides(cfg.eta)
    add(
        "regret",
        rhs + REGRET_TOL,
        lhs,
        precondition_ok=regret_ok,
        note=reason or (
            "" if u_in_ball else "U leaves the radius-c ball but no projection fired"
        ),
    )

    add(
        "flip_count_bound",
        m * drift_obs + math.sqrt(m * math.log(3.0 * T / delta) / 2.0),
        float(np.max(log.flip_count)),
    )

    width_cap = cfg.q * m + math.sqrt(2.0 * m * math.log(T / delta))
    frac = float(np.mean(log.active_neurons > width_cap))
    add("active_width", delta, frac, note=f"width cap {width_cap:.1f}")

    width_req = 2401.0 * gamma**-6 * lam**2
    return LemmaReport(
        checks=checks,
        delta=delta,
        width_ok=m >= width_req,
        meta={
            "m": m,
            "T": T,
            "eta": cfg.eta,
            "q": cfg.q,
            "c": cfg.c,
            "gamma": gamma,
            "lambda": lam,
            "m_required": width_req,
            "seed": cfg.seed,
            "telescope_min_slack": log.telescope_min_slack,
        },
    )


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    se: float
    n: int


def _fresh_eval_set(spec: MarginSpec, rng: RngStream, n: int) -> Dataset:
    if spec.kind == "halfspace":
        return sample_halfspace(rng, spec, n)
    if spec.holdout is None or len(spec.holdout) == 0:
        raise ValueError("non-halfspace spec needs a holdout pool for risk estimation")
    # no generative model: resample the held-out pool
    idx = rng.gen.integers(0, len(spec.holdout), size=n)
    return Dataset(spec.holdout.X[idx], spec.holdout.y[idx])


def misclassification_rate(outputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction with y * output <= 0 (a zero output counts as an error)."""
    return float(np.mean(labels * outputs <= 0.0))


def estimate_risk(
    params: NetworkParams,
    mask: DropoutMask | None,
    spec: MarginSpec,
    rng: RngStream,
    n_mc: int,
) -> RiskEstimate:
    """Monte Carlo misclassification rate on fresh samples from spec.

    Scores the full network when mask is None, the masked sub-network
    otherwise; the boundary y * output = 0 is counted as an error, so a
    zero network has risk exactly 1.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    ds = _fresh_eval_set(spec, rng, n_mc)
    if mask is None:
        out = forward_full_batch(params, ds.X)
    else:
        out = forward_sub_batch(params, mask, ds.X)
    value = misclassification_rate(out, ds.y)
    se = math.sqrt(max(value * (1.0 - value), 0.0) / n_mc)
    return RiskEstimate(value=value, se=se, n=n_mc)
