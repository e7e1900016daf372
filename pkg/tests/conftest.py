"""Shared fixtures: the heavyweight training sweeps are executed once per
session and reused by the unit tests and the acceptance criteria."""

import time

import numpy as np
import pytest

from lazydrop.data import certified_margin, halfspace_spec, halfspace_stream
from lazydrop.experiment import ExperimentSpec, execute
from lazydrop.model import init_network_conditioned
from lazydrop.numerics import RngStream, STREAM_DATA, STREAM_INIT
from lazydrop.theory import build_competitor, compute_bounds
from lazydrop.trainer import TrainConfig, train

# the m=4096 halfspace configuration shared by several criteria
BASE = dict(d=20, gamma0=0.5, q=0.5, eta=0.5, T=2000)


def unit_direction(d):
    u = np.zeros(d)
    u[0] = 1.0
    return u


def train_halfspace(
    seed,
    m,
    q=0.5,
    d=20,
    gamma0=0.5,
    eta=0.5,
    T=2000,
    with_competitor=True,
    store_snapshots=False,
    snapshot_stride=None,
    c=None,
):
    """One seeded halfspace run with the default analysis objects attached."""
    spec = halfspace_spec(unit_direction(d), gamma0, q)
    gamma = certified_margin(spec)
    bounds = compute_bounds(gamma, eta, T, m, d)
    cfg = TrainConfig(
        m=m, d=d, q=q, eta=eta, c=c if c is not None else bounds.c, T=T,
        seed=seed, snapshot_stride=snapshot_stride,
    )
    init = init_network_conditioned(RngStream(seed, STREAM_INIT), m, d)
    comp = build_competitor(init, spec, bounds.lam, gamma=gamma) if with_competitor else None
    stream = halfspace_stream(RngStream(seed, STREAM_DATA), spec)
    run = train(cfg, stream, competitor=comp, params_init=init,
                store_snapshots=store_snapshots)
    return run, comp, bounds, spec


def crit3_spec(outdir, name="crit3"):
    """The 20-seed acceptance configuration as an experiment spec."""
    return ExperimentSpec(
        name=name,
        data="halfspace",
        d=20,
        eta=0.5,
        T=2000,
        widths=[4096],
        rates=[0.5],
        seeds=list(range(20)),
        gamma0=0.5,
        n_mc=200,
        n_random_masks=0,
        delta=0.05,
        snapshot_stride=20,
        theory_checks=True,
        outdir=str(outdir),
    )


@pytest.fixture(scope="session")
def crit3_execution(tmp_path_factory):
    """Execute the 20-seed configuration once; checks run ungated.

    Returns (cells, wall_seconds, experiment_dir).
    """
    outdir = tmp_path_factory.mktemp("crit3")
    spec = crit3_spec(outdir)
    t0 = time.monotonic()
    cells = execute(spec, lemma_mode="always")
    elapsed = time.monotonic() - t0
    return cells, elapsed, spec.out_path


@pytest.fixture(scope="session")
def acceptance_log():
    """Collector printed as a summary table at the end of the session."""
    return []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion(request, acceptance_log):
    def _record(number, passed, detail=""):
        line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        acceptance_log.append(line)
        lines = getattr(request.config, "_acceptance_lines", [])
        lines.append(line)
        request.config._acceptance_lines = lines
        print(line)
        assert passed, line

    return _record
