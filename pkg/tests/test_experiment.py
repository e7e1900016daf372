"""Config parsing, the sweep harness, its outputs, and the CLI surface."""

import json
import math

import numpy as np
import pytest

from lazydrop.cli import main as cli_main
from lazydrop.experiment import (
    ConfigError,
    ExperimentSpec,
    execute,
    parse_config,
    run_experiment,
)

from test_data import write_idx_pair

MINIMAL = """
data = halfspace
d = 6
gamma0 = 0.5
m = 32
q = 0.5
eta = 0.5
T = 40
"""


def tiny_spec(outdir, **overrides):
    base = dict(
        name="tiny",
        data="halfspace",
        d=6,
        eta=0.5,
        T=60,
        widths=[48],
        rates=[0.5],
        seeds=[0, 1],
        gamma0=0.5,
        n_mc=300,
        snapshot_stride=10,
        outdir=str(outdir),
    )
    base.update(overrides)
    return ExperimentSpec(**base)


class TestParseConfig:
    def test_minimal_fills_defaults(self):
        spec = parse_config(MINIMAL)
        assert spec.name == "experiment"
        assert spec.widths == [32]
        assert spec.rates == [0.5]
        assert spec.seeds == [0]
        assert spec.delta == 0.05
        assert spec.snapshot_stride == 1  # max(1, T//200)
        assert spec.variant == "standard"
        assert spec.theory_checks is True
        assert spec.c is None

    def test_default_stride_scales_with_horizon(self):
        spec = parse_config(MINIMAL.replace("T = 40", "T = 2000"))
        assert spec.snapshot_stride == 10

    def test_sweep_axes(self):
        text = MINIMAL.replace("m = 32", "widths = 16, 64").replace(
            "q = 0.5", "rates = 0.1 0.5 0.7"
        )
        spec = parse_config(text + "\nn_seeds = 3\n")
        assert spec.widths == [16, 64]
        assert spec.rates == [0.1, 0.5, 0.7]
        assert len(list(spec.cells())) == 2 * 3 * 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key 'momentum'"):
            parse_config(MINIMAL + "momentum = 0.9\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate key"):
            parse_config(MINIMAL + "eta = 0.2\n")

    def test_eta_above_ln2_with_theory_rejected(self):
        with pytest.raises(ConfigError, match=r"\(0, ln 2\]"):
            parse_config(MINIMAL.replace("eta = 0.5", "eta = 0.8"))

    def test_eta_above_ln2_allowed_without_theory(self):
        spec = parse_config(
            MINIMAL.replace("eta = 0.5", "eta = 0.8") + "theory_checks = false\n"
        )
        assert spec.eta == 0.8 and not spec.theory_checks

    def test_negative_gamma0_rejected(self):
        with pytest.raises(ConfigError, match="gamma0"):
            parse_config(MINIMAL.replace("gamma0 = 0.5", "gamma0 = -0.1"))

    def test_inverted_with_theory_rejected(self):
        with pytest.raises(ConfigError, match="variant"):
            parse_config(MINIMAL + "variant = inverted\n")

    def test_both_m_and_widths_rejected(self):
        with pytest.raises(ConfigError, match="not both"):
            parse_config(MINIMAL + "widths = 8\n")

    def test_missing_required_key_named(self):
        with pytest.raises(ConfigError, match="'eta'"):
            parse_config("data = halfspace\nd = 4\ngamma0 = 0.5\nm = 8\nq = 1\nT = 5\n")

    def test_type_mismatch_names_key(self):
        with pytest.raises(ConfigError, match="'T'"):
            parse_config(MINIMAL.replace("T = 40", "T = soon"))

    def test_comments_and_blanks_ignored(self):
        spec = parse_config("# a comment\n\n" + MINIMAL + "  # trailing\n")
        assert spec.T == 40


class TestExecute:
    def test_single_cell_smoke_t1(self, tmp_path):
        spec = tiny_spec(tmp_path, T=1, seeds=[0], snapshot_stride=1)
        cells = execute(spec)
        assert len(cells) == 1
        csv_path = tmp_path / "tiny" / "cell_m48_q0.5_s0.csv"
        assert csv_path.exists()
        lines = csv_path.read_text().splitlines()
        assert len(lines) == 2  # header + the single recorded iteration
        assert (tmp_path / "tiny" / "summary.csv").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        spec_a = tiny_spec(tmp_path / "a")
        spec_b = tiny_spec(tmp_path / "b")
        execute(spec_a)
        execute(spec_b)
        for name in ["cell_m48_q0.5_s0.csv", "cell_m48_q0.5_s1.csv", "summary.csv"]:
            assert (
                (tmp_path / "a" / "tiny" / name).read_bytes()
                == (tmp_path / "b" / "tiny" / name).read_bytes()
            ), name

    def test_worker_pool_matches_serial(self, tmp_path):
        spec_a = tiny_spec(tmp_path / "serial")
        spec_b = tiny_spec(tmp_path / "pool")
        execute(spec_a, workers=1)
        execute(spec_b, workers=2)
        for p in sorted((tmp_path / "serial" / "tiny").glob("*.csv")):
            q = tmp_path / "pool" / "tiny" / p.name
            assert p.read_bytes() == q.read_bytes(), p.name

    def test_risk_columns_present_and_sane(self, tmp_path):
        spec = tiny_spec(tmp_path, n_random_masks=5)
        cells = execute(spec)
        header = open(cells[0].csv_path).readline().strip().split(",")
        assert header[-3:] == ["risk_full", "risk_visited", "risk_random_mean"]
        for cell in cells:
            assert np.all((cell.risks.full >= 0) & (cell.risks.full <= 1))
            assert cell.risks.random_mean is not None

    def test_summary_matches_recomputation_from_cell_csvs(self, tmp_path):
        import csv as csvmod

        spec = tiny_spec(tmp_path)
        execute(spec)
        exp = tmp_path / "tiny"
        finals, avgs = [], []
        for seed in (0, 1):
            with open(exp / f"cell_m48_q0.5_s{seed}.csv") as f:
                rows = list(csvmod.DictReader(f))
            finals.append(float(rows[-1]["risk_full"]))
            avgs.append(np.mean([float(r["risk_full"]) for r in rows]))
        with open(exp / "summary.csv") as f:
            srow = list(csvmod.DictReader(f))[0]
        assert float(srow["final_risk_full_mean"]) == pytest.approx(
            np.mean(finals), rel=1e-12
        )
        assert float(srow["avg_risk_full_mean"]) == pytest.approx(
            np.mean(avgs), rel=1e-12
        )
        assert int(srow["n_seeds"]) == 2

    def test_gated_lemma_report_records_unmet_preconditions(self, tmp_path):
        spec = tiny_spec(tmp_path)
        execute(spec, lemma_mode="gated")
        blob = json.loads((tmp_path / "tiny" / "lemma_report.json").read_text())
        # desk-scale widths never reach the required width, so the gate closes
        assert all(cell["status"] == "preconditions unmet" for cell in blob["cells"])
        assert blob["aggregate"] == {}

    def test_ungated_lemma_report_carries_checks(self, tmp_path):
        spec = tiny_spec(tmp_path, widths=[256], T=200, seeds=[0, 1, 2])
        execute(spec, lemma_mode="always", skip_risk=True)
        blob = json.loads((tmp_path / "tiny" / "lemma_report.json").read_text())
        agg = blob["aggregate"]
        assert agg["regret"]["seeds_total"] == 3
        assert agg["regret"]["seeds_passed"] == 3
        assert agg["regret"]["worst_slack"] >= 0.0
        for cell in blob["cells"]:
            assert len(cell["checks"]) == 8

    def test_theory_off_skips_reports(self, tmp_path):
        spec = tiny_spec(tmp_path, theory_checks=False)
        execute(spec)
        assert not (tmp_path / "tiny" / "lemma_report.json").exists()

    def test_unwritable_output_errors(self, tmp_path):
        target = tmp_path / "blocked"
        target.write_text("a file, not a directory")
        spec = tiny_spec(target / "sub")
        assert run_experiment(spec) == 1


class TestCli:
    def test_run_and_report(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(
            MINIMAL.replace("T = 40", "T = 60")
            + f"outdir = {tmp_path / 'out'}\nname = cliexp\nn_mc = 200\nsnapshot_stride = 10\n"
        )
        assert cli_main(["run", str(cfg)]) == 0
        exp = tmp_path / "out" / "cliexp"
        assert (exp / "summary.csv").exists()
        assert cli_main(["report", str(exp)]) == 0
        curves = exp / "curves.png"
        assert curves.exists() and curves.stat().st_size > 1000
        assert (exp / "gap.png").exists()

    def test_verify_subcommand(self, tmp_path, capsys):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(
            MINIMAL.replace("T = 40", "T = 150").replace("m = 32", "m = 256")
            + f"outdir = {tmp_path / 'out'}\nname = ver\nsnapshot_stride = 10\n"
        )
        assert cli_main(["verify", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "[PASS] regret" in out
        assert (tmp_path / "out" / "ver" / "lemma_report.json").exists()

    def test_bounds_subcommand(self, capsys):
        status = cli_main([
            "bounds", "--gamma", "0.125", "--eta", "0.5", "--T", "2000",
            "--m", "4096", "--d", "20",
        ])
        assert status == 0
        out = capsys.readouterr().out
        assert "lambda" in out and "thm1_bound" in out and "m_required" in out

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(MINIMAL + "zebra = 1\n")
        assert cli_main(["run", str(cfg)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_mnist_prepare(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        images = rng.integers(1, 255, size=(40, 4, 4))
        labels = np.tile([0, 1, 2, 3], 10)
        write_idx_pair(tmp_path, images, labels)
        out = tmp_path / "pairs.txt"
        status = cli_main([
            "mnist-prepare", str(tmp_path), "--pos", "1", "--neg", "3",
            "--out", str(out),
        ])
        assert status == 0
        assert "20 examples" in capsys.readouterr().out
        from lazydrop.data import load_dataset_text

        ds = load_dataset_text(out)
        assert len(ds) == 20 and ds.d == 16
