"""Configuration-driven experiment sweeps with CSV metrics output.

A flat `key = value` config describes a sweep over widths, dropout rates and
seeds. Every cell trains one network, logs its iterate metrics plus Monte
Carlo risk estimates to `cell_m<m>_q<q>_s<seed>.csv`, and the harness then
writes `summary.csv` (mean +- sd over seeds) and, when the per-run checks
ran, `lemma_report.json`. A run is a pure function of its config, so re-runs
produce byte-identical output.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    MarginSpec,
    certified_margin,
    estimate_margin,
    finite_stream,
    halfspace_spec,
    halfspace_stream,
    load_mnist_binary,
)
from .model import init_network, init_network_conditioned
from .numerics import (
    LN2,
    RngStream,
    STREAM_DATA,
    STREAM_EVAL_MASKS,
    STREAM_INIT,
    STREAM_MC,
)
from .theory import (
    BoundReport,
    LemmaReport,
    build_competitor,
    compute_bounds,
    misclassification_rate,
    verify_lemmas,
    _fresh_eval_set,
)
from .trainer import CSV_COLUMNS, RunResult, TrainConfig, train, metrics_rows

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass
class ExperimentSpec:
    """A named sweep over (width, dropout rate, seed) cells."""

    name: str
    data: str                      # "halfspace" or "mnist"
    d: int
    eta: float
    T: int
    widths: list[int]
    rates: list[float]             # dropout rates 1 - q
    seeds: list[int]
    gamma0: float | None = None
    c: float | None = None         # None: use the computed default per cell
    n_mc: int = 2000
    n_random_masks: int = 0
    delta: float = 0.05
    snapshot_stride: int | None = None
    variant: str = "standard"
    theory_checks: bool = True
    outdir: str = "runs"
    mnist_dir: str | None = None
    mnist_pos: int = 0
    mnist_neg: int = 1
    mnist_split: str = "train"

    def cells(self):
        for m in self.widths:
            for rate in self.rates:
                for seed in self.seeds:
                    yield m, rate, seed

    @property
    def out_path(self) -> Path:
        return Path(self.outdir) / self.name


_KEY_TYPES = {
    "name": str,
    "data": str,
    "d": int,
    "gamma0": float,
    "m": int,
    "widths": "int_list",
    "q": float,
    "rates": "float_list",
    "eta": float,
    "T": int,
    "c": float,
    "seeds": "int_list",
    "n_seeds": int,
    "n_mc": int,
    "n_random_masks": int,
    "delta": float,
    "snapshot_stride": int,
    "variant": str,
    "theory_checks": bool,
    "outdir": str,
    "mnist_dir": str,
    "mnist_pos": int,
    "mnist_neg": int,
    "mnist_split": str,
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    kind = _KEY_TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind == "int_list":
            return [int(v) for v in raw.replace(",", " ").split()]
        if kind == "float_list":
            return [float(v) for v in raw.replace(",", " ").split()]
        if kind is float and raw.lower() == "auto":
            return None
        return kind(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> ExperimentSpec:
    """Parse and validate the flat key = value experiment format.

    Unknown keys are rejected; errors name the offending key and the
    violated constraint. Defaults: name=experiment, delta=0.05,
    snapshot_stride=max(1, T//200), variant=standard, theory_checks=true,
    n_mc=2000, n_random_masks=0, seeds=[0..n_seeds-1] with n_seeds=1,
    outdir=runs.
    """
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)

    for req in ("data", "eta", "T"):
        if req not in values:
            raise ConfigError(f"missing required key {req!r}")
    data = values["data"]
    if data not in ("halfspace", "mnist"):
        raise ConfigError("key 'data': must be 'halfspace' or 'mnist'")
    if data == "halfspace":
        for req in ("d", "gamma0"):
            if req not in values:
                raise ConfigError(f"missing required key {req!r} for halfspace data")
        if not 0.0 < values["gamma0"] <= 0.999:
            raise ConfigError("key 'gamma0': must lie in (0, 0.999]")
    else:
        if "mnist_dir" not in values:
            raise ConfigError("missing required key 'mnist_dir' for mnist data")
        values.setdefault("d", 784)

    if "m" in values and "widths" in values:
        raise ConfigError("give either 'm' or 'widths', not both")
    widths = values.get("widths", [values["m"]] if "m" in values else None)
    if widths is None:
        raise ConfigError("missing required key 'm' (or 'widths')")
    if any(w < 1 for w in widths):
        raise ConfigError("key 'widths': entries must be >= 1")

    if "q" in values and "rates" in values:
        raise ConfigError("give either 'q' or 'rates', not both")
    if "rates" in values:
        rates = values["rates"]
    elif "q" in values:
        rates = [1.0 - values["q"]]
    else:
        raise ConfigError("missing required key 'q' (or 'rates')")
    for r in rates:
        if not 0.0 <= r < 1.0:
            raise ConfigError("key 'rates': dropout rates must lie in [0, 1)")

    if "seeds" in values and "n_seeds" in values:
        raise ConfigError("give either 'seeds' or 'n_seeds', not both")
    seeds = values.get("seeds", list(range(values.get("n_seeds", 1))))
    if not seeds:
        raise ConfigError("key 'seeds': need at least one seed")

    eta = values["eta"]
    if eta <= 0.0:
        raise ConfigError("key 'eta': must be positive")
    T = values["T"]
    if T < 1:
        raise ConfigError("key 'T': must be >= 1")
    delta = values.get("delta", 0.05)
    if not 0.0 < delta < 1.0:
        raise ConfigError("key 'delta': must lie in (0, 1)")
    variant = values.get("variant", "standard")
    if variant not in ("standard", "inverted"):
        raise ConfigError("key 'variant': must be 'standard' or 'inverted'")
    theory = values.get("theory_checks", True)
    if theory and eta > LN2 + 1e-12:
        raise ConfigError(
            f"key 'eta': theory checks require a learning rate in (0, ln 2] "
            f"~ (0, 0.6931]; got {eta} (set theory_checks = false to run anyway)"
        )
    if theory and variant == "inverted":
        raise ConfigError(
            "key 'variant': theory checks are defined for the standard variant"
        )
    n_mc = values.get("n_mc", 2000)
    if n_mc < 1:
        raise ConfigError("key 'n_mc': must be >= 1")
    n_rm = values.get("n_random_masks", 0)
    if n_rm < 0:
        raise ConfigError("key 'n_random_masks': must be >= 0")
    stride = values.get("snapshot_stride", max(1, T // 200))
    if stride < 1:
        raise ConfigError("key 'snapshot_stride': must be >= 1")

    return ExperimentSpec(
        name=values.get("name", "experiment"),
        data=data,
        d=values["d"],
        eta=eta,
        T=T,
        widths=widths,
        rates=rates,
        seeds=seeds,
        gamma0=values.get("gamma0"),
        c=values.get("c"),
        n_mc=n_mc,
        n_random_masks=n_rm,
        delta=delta,
        snapshot_stride=stride,
        variant=variant,
        theory_checks=theory,
        outdir=values.get("outdir", "runs"),
        mnist_dir=values.get("mnist_dir"),
        mnist_pos=values.get("mnist_pos", 0),
        mnist_neg=values.get("mnist_neg", 1),
        mnist_split=values.get("mnist_split", "train"),
    )


def load_config(path) -> ExperimentSpec:
    return parse_config(Path(path).read_text())


@dataclass
class RiskCurves:
    t: np.ndarray
    full: np.ndarray
    visited: np.ndarray
    random_mean: np.ndarray | None = None


def risk_curves(
    run: RunResult,
    spec: MarginSpec,
    rng: RngStream,
    n_mc: int,
    n_random_masks: int = 0,
    mask_rng: RngStream | None = None,
) -> RiskCurves:
    """Risk of the rescaled full network and of sub-networks at every snapshot.

    One held-out evaluation set is drawn per call and shared across
    snapshots (paired estimates); random masks are drawn once and kept fixed
    across iterations.
    """
    if not run.snapshots:
        raise ValueError("run has no stored snapshots")
    ds = _fresh_eval_set(spec, rng, n_mc)
    X, yv = ds.X, ds.y
    a = run.final.a
    m = run.config.m
    inv_sqrt_m = 1.0 / math.sqrt(m)
    out_scale = run.config.q if run.config.variant == "standard" else 1.0
    M = None
    if n_random_masks > 0:
        mrng = mask_rng if mask_rng is not None else rng
        bits = (mrng.gen.random((n_random_masks, m)) < run.config.q).astype(np.float64)
        M = bits * a * inv_sqrt_m
    ts, full, visited, rand = [], [], [], []
    for snap in run.snapshots:
        H = np.maximum(X @ snap.W.T, 0.0)
        out_full = out_scale * (H @ a) * inv_sqrt_m
        out_vis = (H @ (a * snap.mask_bits)) * inv_sqrt_m
        ts.append(snap.t)
        full.append(misclassification_rate(out_full, yv))
        visited.append(misclassification_rate(out_vis, yv))
        if M is not None:
            outs = H @ M.T
            rand.append(float(np.mean(yv[:, None] * outs <= 0.0)))
    return RiskCurves(
        t=np.asarray(ts, dtype=np.int64),
        full=np.asarray(full),
        visited=np.asarray(visited),
        random_mean=np.asarray(rand) if M is not None else None,
    )


@dataclass
class CellResult:
    m: int
    rate: float
    q: float
    seed: int
    bounds: BoundReport
    run: RunResult
    csv_path: str
    risks: RiskCurves | None = None
    lemma: LemmaReport | None = None
    lemma_status: str = ""
    gamma: float = float("nan")

    @property
    def final_risk_full(self) -> float:
        return float(self.risks.full[-1]) if self.risks is not None else float("nan")

    @property
    def final_risk_visited(self) -> float:
        return float(self.risks.visited[-1]) if self.risks is not None else float("nan")


def _margin_spec_for(spec: ExperimentSpec, q: float) -> MarginSpec:
    if spec.data == "halfspace":
        u_star = np.zeros(spec.d)
        u_star[0] = 1.0
        return halfspace_spec(u_star, spec.gamma0, q)
    train_ds = load_mnist_binary(spec.mnist_dir, spec.mnist_pos, spec.mnist_neg, spec.mnist_split)
    hold_split = "test" if spec.mnist_split == "train" else "train"
    try:
        holdout = load_mnist_binary(spec.mnist_dir, spec.mnist_pos, spec.mnist_neg, hold_split)
    except FileNotFoundError:
        holdout = train_ds
    u_hat = _linear_fit(train_ds)
    ms = MarginSpec(kind="mnist-binary", q=q, u_star=u_hat, holdout=holdout)
    ms.train_pool = train_ds  # type: ignore[attr-defined]
    return ms


def _linear_fit(ds: Dataset, ridge: float = 1e-3) -> np.ndarray:
    """Unit-norm ridge-regression direction; the heuristic feature map for
    data without a certified margin."""
    X, y = ds.X, ds.y
    G = X.T @ X + ridge * np.eye(ds.d)
    w = np.linalg.solve(G, X.T @ y)
    return w / np.linalg.norm(w)


def _cell_gamma(spec: ExperimentSpec, mspec: MarginSpec, seed: int) -> float:
    if mspec.kind == "halfspace":
        return certified_margin(mspec)
    # heuristic margin: Monte Carlo estimate minus 3 standard errors
    pool = getattr(mspec, "train_pool", mspec.holdout)
    sub = pool[: min(len(pool), 64)]
    est = estimate_margin(RngStream(seed, STREAM_MC + 100), mspec, sub, 2000)
    return max(est.value - 3.0 * est.se, 1e-6)


def run_cell(
    spec: ExperimentSpec, m: int, rate: float, seed: int,
    skip_risk: bool = False, lemma_mode: str = "gated",
) -> CellResult:
    """Train and post-process one (width, rate, seed) cell; writes its CSV."""
    q = 1.0 - rate
    mspec = _margin_spec_for(spec, q)
    gamma = _cell_gamma(spec, mspec, seed)
    bounds = compute_bounds(gamma, spec.eta, spec.T, m, spec.d, spec.delta)
    c = spec.c if spec.c is not None else bounds.c
    config = TrainConfig(
        m=m, d=spec.d, q=q, eta=spec.eta, c=c, T=spec.T, seed=seed,
        variant=spec.variant, snapshot_stride=spec.snapshot_stride,
    )
    init_rng = RngStream(seed, STREAM_INIT)
    if spec.theory_checks:
        params_init = init_network_conditioned(init_rng, m, spec.d)
        competitor = build_competitor(params_init, mspec, bounds.lam, gamma=gamma)
    else:
        params_init = init_network(init_rng, m, spec.d)
        competitor = None
    if spec.data == "halfspace":
        stream = halfspace_stream(RngStream(seed, STREAM_DATA), mspec)
    else:
        stream = finite_stream(RngStream(seed, STREAM_DATA), getattr(mspec, "train_pool"))
    run = train(config, stream, competitor=competitor, params_init=params_init)

    risks = None
    if not skip_risk:
        risks = risk_curves(
            run, mspec, RngStream(seed, STREAM_MC), spec.n_mc,
            n_random_masks=spec.n_random_masks,
            mask_rng=RngStream(seed, STREAM_EVAL_MASKS),
        )

    lemma = None
    status = ""
    if spec.theory_checks:
        eligible = spec.eta <= LN2 + 1e-12 and bounds.width_ok
        if lemma_mode == "always" or (lemma_mode == "gated" and eligible):
            lemma = verify_lemmas(run, competitor, delta=spec.delta)
            status = "ok" if lemma.all_passed else "failed"
        elif lemma_mode != "off":
            status = "preconditions unmet"

    out_path = spec.out_path
    out_path.mkdir(parents=True, exist_ok=True)
    csv_path = out_path / f"cell_m{m}_q{q:g}_s{seed}.csv"
    _write_cell_csv(csv_path, run, risks)

    # snapshots fed the risk curves; keep only the final one (its mask
    # identifies the last visited sub-network) and drop the bulk
    run.snapshots = run.snapshots[-1:]
    return CellResult(
        m=m, rate=rate, q=q, seed=seed, bounds=bounds, run=run,
        csv_path=str(csv_path), risks=risks, lemma=lemma, lemma_status=status,
        gamma=gamma,
    )


def _write_cell_csv(path, run: RunResult, risks: RiskCurves | None) -> None:
    rows = list(metrics_rows(run.records))
    if risks is not None:
        risk_cols = ["risk_full", "risk_visited"]
        extra = [
            [repr(float(v)) for v in risks.full],
            [repr(float(v)) for v in risks.visited],
        ]
        if risks.random_mean is not None:
            risk_cols.append("risk_random_mean")
            extra.append([repr(float(v)) for v in risks.random_mean])
        rows[0] = rows[0] + "," + ",".join(risk_cols)
        for i in range(1, len(rows)):
            rows[i] = rows[i] + "," + ",".join(col[i - 1] for col in extra)
    with open(path, "w", newline="") as f:
        f.write("\n".join(rows) + "\n")


def _cell_worker(args):
    spec, m, rate, seed, skip_risk, lemma_mode = args
    return run_cell(spec, m, rate, seed, skip_risk=skip_risk, lemma_mode=lemma_mode)


def execute(
    spec: ExperimentSpec,
    workers: int = 1,
    skip_risk: bool = False,
    lemma_mode: str = "gated",
) -> list[CellResult]:
    """Run every cell, then write summary.csv and lemma_report.json."""
    jobs = [(spec, m, rate, seed, skip_risk, lemma_mode) for m, rate, seed in spec.cells()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_worker, jobs))
    else:
        results = [_cell_worker(j) for j in jobs]
    _write_summary(spec, results)
    if spec.theory_checks and lemma_mode != "off":
        _write_lemma_report(spec, results)
    return results


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> int:
    """Full sweep (training, risk estimation, gated checks); 0 on success."""
    try:
        execute(spec, workers=workers)
    except OSError as e:
        print(f"error: {e}")
        return 1
    return 0


def _mean_sd(vals: list[float]) -> tuple[float, float]:
    arr = np.asarray(vals, dtype=np.float64)
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), sd


def _write_summary(spec: ExperimentSpec, results: list[CellResult]) -> None:
    groups: dict[tuple[int, float], list[CellResult]] = {}
    for r in results:
        groups.setdefault((r.m, r.q), []).append(r)
    have_risk = all(r.risks is not None for r in results)
    have_random = have_risk and all(r.risks.random_mean is not None for r in results)
    cols = ["m", "q", "n_seeds"]
    for base in ["final_risk_full", "final_risk_visited", "final_gap"] + (
        ["final_risk_random"] if have_random else []
    ) + (["avg_risk_full"] if have_risk else []):
        cols += [f"{base}_mean", f"{base}_sd"]
    cols += ["final_inst_loss_mean", "final_inst_loss_sd", "lemma_seeds_passed",
             "lemma_seeds_total", "lemma_status"]
    lines = [",".join(cols)]
    for (m, q) in sorted(groups):
        cells = sorted(groups[(m, q)], key=lambda r: r.seed)
        row = [str(m), repr(float(q)), str(len(cells))]
        if have_risk:
            stats = [
                [r.final_risk_full for r in cells],
                [r.final_risk_visited for r in cells],
                [r.final_risk_visited - r.final_risk_full for r in cells],
            ]
            if have_random:
                stats.append([float(r.risks.random_mean[-1]) for r in cells])
            stats.append([float(np.mean(r.risks.full)) for r in cells])
            for vals in stats:
                mean, sd = _mean_sd(vals)
                row += [repr(mean), repr(sd)]
        else:
            n_stats = 3 + (1 if have_random else 0)
            row += [""] * (2 * n_stats)
        mean, sd = _mean_sd([float(r.run.log.inst_loss[-1]) for r in cells])
        row += [repr(mean), repr(sd)]
        ran = [r for r in cells if r.lemma is not None]
        passed = sum(1 for r in ran if r.lemma.all_passed)
        status = (
            "; ".join(sorted({r.lemma_status for r in cells if r.lemma_status}))
            or "off"
        )
        row += [str(passed), str(len(ran)), status]
        lines.append(",".join(row))
    with open(spec.out_path / "summary.csv", "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def _write_lemma_report(spec: ExperimentSpec, results: list[CellResult]) -> None:
    import json

    cells = []
    agg: dict[str, dict] = {}
    for r in sorted(results, key=lambda r: (r.m, r.q, r.seed)):
        entry = {
            "m": r.m,
            "q": r.q,
            "seed": r.seed,
            "gamma": r.gamma,
            "m_required": r.bounds.m_required,
            "width_ok": r.bounds.width_ok,
            "status": r.lemma_status or "off",
        }
        if r.lemma is not None:
            entry["checks"] = [c.as_dict() for c in r.lemma.checks]
            for c in r.lemma.checks:
                slot = agg.setdefault(
                    c.check_id,
                    {"seeds_passed": 0, "seeds_total": 0, "worst_slack": math.inf},
                )
                slot["seeds_total"] += 1
                if c.passed:
                    slot["seeds_passed"] += 1
                slot["worst_slack"] = min(slot["worst_slack"], c.slack)
        cells.append(entry)
    for slot in agg.values():
        if slot["worst_slack"] == math.inf:
            slot["worst_slack"] = None
    report = {
        "experiment": spec.name,
        "delta": spec.delta,
        "eta": spec.eta,
        "T": spec.T,
        "cells": cells,
        "aggregate": agg,
    }
    with open(spec.out_path / "lemma_report.json", "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
