import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tracecip import cli
from tracecip.gp import KernelSpec, build_covariance
from tracecip.loss import cip_bound
from tracecip.mechanisms import (
    NoiseMechanism,
    UtilityBudget,
    load_mechanism,
    parse_record,
    save_mechanism,
    uniform_baseline,
)
from tracecip.secrets import SecretKind, SecretSet
from tracecip.traceio import DEFAULT_GRID, read_trace_csv, synth_trace, write_trace_csv


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def synth_dir(tmp_path):
    d = tmp_path / "traces"
    d.mkdir()
    for seed in range(12):
        write_trace_csv(synth_trace(KernelSpec(l_eff=6.0), 50, seed), d / f"t{seed:02d}.csv")
    return d


@pytest.fixture(scope="module")
def rbf6_mech(tmp_path_factory):
    path = tmp_path_factory.mktemp("mech") / "mech.csv"
    assert cli.main(["design", "--secret", "basic:i=25,r=1", "--out", str(path)]) == 0
    return path


class TestSecretGrammar:
    def test_basic(self):
        req = cli.parse_secret("basic:i=25,r=1")
        assert req.secret == SecretSet.basic(25, radius=1.0)

    def test_compound(self):
        req = cli.parse_secret("compound:i=24,25;r=0.5")
        assert req.secret.indices == (24, 25)
        assert req.secret.kind is SecretKind.COMPOUND
        assert req.radius == 0.5

    def test_compound_unique_times(self):
        assert cli.parse_secret("compound:i=2,3,4,5;S=2").secret.unique_times == 2

    def test_all_basic(self):
        req = cli.parse_secret("all-basic:r=2")
        assert req.all_basic and req.radius == 2.0

    @pytest.mark.parametrize("text", ["basic:r=1", "nope:i=1", "basic:i=x", "basic:q=1,i=2", "all-basic:i=1",
                                      "basic:3"])
    def test_invalid(self, text):
        with pytest.raises(cli.InputError):
            cli.parse_secret(text)

    def test_sweep(self):
        assert_allclose(cli.parse_sweep("l_eff=0.5:20:12"), np.geomspace(0.5, 20, 12))
        with pytest.raises(cli.InputError):
            cli.parse_sweep("l=1:2:3")


class TestFit:
    def test_synthetic_median(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "fitted.csv"
        assert cli.main(["fit", str(synth_dir), "--no-filter", "--out", str(out)]) == 0
        summary = parse_record(capsys.readouterr().out)
        step = math.log(DEFAULT_GRID[1] / DEFAULT_GRID[0])
        assert abs(math.log(summary["median"] / 6.0)) <= step + 1e-12
        assert summary["count"] == 12
        assert len(read_rows(out)) == 12

    def test_empty_directory(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert cli.main(["fit", str(tmp_path / "empty")]) == cli.EXIT_INPUT
        assert "no CSV traces" in capsys.readouterr().err

    def test_single_grid_value(self, synth_dir, tmp_path):
        out = tmp_path / "fitted.csv"
        assert cli.main(["fit", str(synth_dir), "--no-filter", "--grid", "4.5", "--out", str(out)]) == 0
        assert {float(r["l_eff"]) for r in read_rows(out)} == {4.5}

    def test_bad_files_skipped(self, synth_dir, tmp_path):
        (synth_dir / "zz_bad.csv").write_text("garbage\n1,2\n")
        out = tmp_path / "fitted.csv"
        assert cli.main(["fit", str(synth_dir), "--no-filter", "--out", str(out)]) == 0
        assert len(read_rows(out)) == 12

    def test_all_rejected(self, synth_dir, tmp_path):
        # unit-spaced synthetic traces fail the default duration window
        assert cli.main(["fit", str(synth_dir), "--out", str(tmp_path / "f.csv")]) == cli.EXIT_INPUT


class TestDesign:
    def test_header(self, rbf6_mech):
        mf = load_mechanism(rbf6_mech)
        rep = mf.report
        assert rep["status"] == "optimal"
        assert mf.header["secret_indices"] == (25,)
        assert_allclose(rep["epsilon"], 0.5 * 2 * (rep["direct_term"] + rep["alpha_star"]), rtol=1e-15)
        assert_allclose(rep["mse"], 25.0, rtol=1e-10)

    def test_independent_limit(self, tmp_path):
        out = tmp_path / "m.csv"
        assert cli.main(["design", "--l-eff", "0.05", "--secret", "basic:i=3", "--n", "10", "--out", str(out)]) == 0
        assert load_mechanism(out).report["alpha_star"] < 1e-12

    def test_beats_baselines_from_evaluate(self, rbf6_mech, tmp_path):
        curve = tmp_path / "curve.csv"
        args = ["evaluate", "--mech", str(rbf6_mech), "--baseline", "uniform", "--baseline", "concentrated",
                "--secret", "basic:i=25,r=1", "--out", str(curve)]
        assert cli.main(args) == 0
        eps = {r["mechanism"]: float(r["epsilon_bound"]) for r in read_rows(curve)}
        designed = load_mechanism(rbf6_mech).report["epsilon"]
        assert designed < eps["uniform"] and designed < eps["concentrated"]
        assert abs(eps["file"] - designed) <= 1e-10 * designed

    def test_all_basic_dominates(self, tmp_path):
        out = tmp_path / "m.csv"
        assert cli.main(["design", "--secret", "all-basic:r=1", "--n", "20", "--out", str(out)]) == 0
        rep = load_mechanism(out).report
        assert rep["dominates"] == "true"
        assert rep["epsilon"] <= rep["max_epsilon_before_merge"] * (1 + 1e-6)

    def test_solver_failure_exit(self, monkeypatch, tmp_path, capsys):
        def failing(*args, **kwargs):
            return cli.Design(np.eye(5), None, "max_iterations", [])

        monkeypatch.setattr(cli, "design_mechanism", failing)
        assert cli.main(["design", "--secret", "basic:i=1", "--n", "5", "--out", str(tmp_path / "m")]) == 2
        assert "max_iterations" in capsys.readouterr().err

    def test_out_of_range_secret(self, tmp_path):
        assert cli.main(["design", "--secret", "basic:i=60", "--out", str(tmp_path / "m")]) == 1


class TestSanitize:
    def write_zero(self, path, n):
        save_mechanism(path, np.zeros((n, n)), {"secret_indices": (0,), "sigma_s_sq": 0.0, "lambda": 2.0,
                                                "r": 1.0, "report": "", "o_t": 0.0, "kernel": "none"})

    def test_zero_mechanism(self, tmp_path):
        tr = synth_trace(KernelSpec(l_eff=3.0), 10, 0)
        write_trace_csv(tr, tmp_path / "x.csv")
        self.write_zero(tmp_path / "m.csv", 10)
        assert cli.main(["sanitize", str(tmp_path / "x.csv"), str(tmp_path / "m.csv"),
                         "--out", str(tmp_path / "z.csv")]) == 0
        assert_array_equal(read_trace_csv(tmp_path / "z.csv").values, tr.values)

    def test_repeatable(self, rbf6_mech, tmp_path):
        write_trace_csv(synth_trace(KernelSpec(l_eff=6.0), 50, 1), tmp_path / "x.csv")
        outs = []
        for k in range(2):
            out = tmp_path / f"z{k}.csv"
            assert cli.main(["sanitize", str(tmp_path / "x.csv"), str(rbf6_mech), "--seed", "5",
                             "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_empirical_mse(self, rbf6_mech, tmp_path):
        tr = synth_trace(KernelSpec(l_eff=6.0), 50, 1)
        write_trace_csv(tr, tmp_path / "x.csv")
        out = tmp_path / "z.csv"
        sq = np.zeros(50)
        for seed in range(1000):
            cli.main(["sanitize", str(tmp_path / "x.csv"), str(rbf6_mech), "--seed", str(seed), "--out", str(out)])
            sq += (read_trace_csv(out).values[:, 0] - tr.values[:, 0]) ** 2
        diag = np.diag(load_mechanism(rbf6_mech).cov)
        big = diag > 0.05 * diag.max()
        assert_allclose(sq[big] / 1000, diag[big], rtol=0.1)
        assert_allclose(sq.sum() / 1000, diag.sum(), rtol=0.1)

    def test_mismatch(self, rbf6_mech, tmp_path, capsys):
        write_trace_csv(synth_trace(KernelSpec(), 10, 0), tmp_path / "x.csv")
        assert cli.main(["sanitize", str(tmp_path / "x.csv"), str(rbf6_mech), "--out",
                         str(tmp_path / "z.csv")]) == 1
        assert "mechanism covers 50" in capsys.readouterr().err


class TestEvaluate:
    def test_sweep_ordering(self, tmp_path):
        out = tmp_path / "curve.csv"
        args = ["evaluate", "--design", "--baseline", "uniform", "--baseline", "concentrated",
                "--secret", "basic:i=25", "--sweep", "l_eff=1:12:4", "--out", str(out)]
        assert cli.main(args) == 0
        rows = read_rows(out)
        assert len(rows) == 12
        for l in {r["l_eff"] for r in rows}:
            at = {r["mechanism"]: r for r in rows if r["l_eff"] == l}
            assert float(at["sdp"]["interval"]) > float(at["uniform"]["interval"])
            assert float(at["sdp"]["interval"]) > float(at["concentrated"]["interval"])
            assert_allclose(float(at["uniform"]["mse"]), float(at["sdp"]["mse"]), rtol=1e-12)

    def test_misspec_unit_row(self, rbf6_mech, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        base = ["evaluate", "--mech", str(rbf6_mech), "--baseline", "uniform", "--secret", "basic:i=25"]
        assert cli.main(base + ["--out", str(a)]) == 0
        assert cli.main(base + ["--misspec", "0.5,1.0,1.5", "--out", str(b)]) == 0
        plain = read_rows(a)
        unit = [r for r in read_rows(b) if float(r["scale_factor"]) == 1.0]
        assert plain == unit

    def test_epsilon_column(self, tmp_path):
        out = tmp_path / "curve.csv"
        assert cli.main(["evaluate", "--baseline", "uniform", "--secret", "basic:i=10", "--n", "30",
                         "--l-eff", "3", "--budget", "0.7", "--out", str(out)]) == 0
        (row,) = read_rows(out)
        prior = build_covariance(KernelSpec(l_eff=3.0), 30)
        expect = cip_bound(prior, uniform_baseline(30, UtilityBudget(0.7, 30), (10,)), SecretSet.basic(10), 2.0)
        assert abs(float(row["epsilon_bound"]) - expect.epsilon) <= 1e-10 * expect.epsilon

    def test_periodic_compound(self, tmp_path):
        out = tmp_path / "curve.csv"
        assert cli.main(["evaluate", "--kernel", "periodic", "--n", "48", "--design", "--baseline", "uniform",
                         "--secret", "compound:i=23,24", "--out", str(out)]) == 0
        at = {r["mechanism"]: float(r["interval"]) for r in read_rows(out)}
        assert at["sdp"] > at["uniform"]

    def test_needs_a_mechanism(self, tmp_path):
        assert cli.main(["evaluate", "--secret", "basic:i=1", "--out", str(tmp_path / "c.csv")]) == 1

    def test_bad_sweep(self, tmp_path):
        assert cli.main(["evaluate", "--baseline", "uniform", "--secret", "basic:i=1", "--sweep", "l_eff=2:1:3",
                         "--out", str(tmp_path / "c.csv")]) == 1

    def test_jobs_match_serial(self, tmp_path):
        rows = []
        for jobs in ("1", "3"):
            out = tmp_path / f"c{jobs}.csv"
            assert cli.main(["evaluate", "--design", "--secret", "basic:i=5", "--n", "12",
                             "--sweep", "l_eff=1:4:3", "--jobs", jobs, "--out", str(out)]) == 0
            rows.append(read_rows(out))
        assert rows[0] == rows[1]
