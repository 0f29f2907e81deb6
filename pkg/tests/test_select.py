import numpy as np
import pytest

from sparsevi import problems, select, vias
from sparsevi.model import GammaHyperprior, StopRule
from sparsevi.outputs import read_csv, read_json


@pytest.fixture(scope="module")
def small_bundle():
    return problems.gen_hierarchical(0, d=40, n=15)


SMALL = select.SelectionGrid((1e-3, 0.1), (0.05, 1.0, 20.0), iters_per_cell=60)


class TestGrid:
    def test_cells_alpha_major(self):
        assert SMALL.cells()[:3] == [(1e-3, 0.05), (1e-3, 1.0), (1e-3, 20.0)]

    @pytest.mark.parametrize("kw", [dict(alpha_values=()), dict(alpha_values=(0.1, 0.01)),
                                    dict(beta_values=(1.0, -1.0)), dict(beta_values=(1.0, 1.0)),
                                    dict(iters_per_cell=0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            select.SelectionGrid(**kw)

    def test_round_trip(self):
        assert select.SelectionGrid.from_dict(SMALL.to_dict()) == SMALL

    def test_defaults_span(self):
        g = select.SelectionGrid()
        assert len(g.cells()) == 100
        assert g.beta_values[0] == pytest.approx(1e-2) and g.beta_values[-1] == pytest.approx(1e4)


class TestGridSearch:
    def test_single_cell(self, small_bundle):
        g = select.SelectionGrid((0.01,), (2.0,), 40)
        res = select.grid_search(small_bundle.problem, g)
        assert res.best[:2] == (0.01, 2.0)
        assert res.best[2] == res.table[0]["elbo"]

    def test_cell_value_matches_direct_solve(self, small_bundle):
        value, _ = select.cell_elbo(small_bundle.problem, 0.1, 1.0, 60)
        direct = vias.solve(small_bundle.problem, GammaHyperprior(0.1, 1.0), stop=StopRule(60, 1e-10))
        pr = GammaHyperprior(0.1, 1.0)
        assert value == pytest.approx(vias.elbo(small_bundle.problem, pr, direct.state, include_constants=True),
                                      rel=1e-12)

    def test_best_is_table_max(self, small_bundle):
        res = select.grid_search(small_bundle.problem, SMALL)
        assert res.best[2] == max(row["elbo"] for row in res.table)

    def test_adding_cells_never_lowers_best(self, small_bundle):
        sub = select.SelectionGrid((1e-3,), (0.05, 1.0), 60)
        assert select.grid_search(small_bundle.problem, SMALL).best[2] >= \
            select.grid_search(small_bundle.problem, sub).best[2]

    def test_threads_do_not_change_result(self, small_bundle):
        a = select.grid_search(small_bundle.problem, SMALL, threads=1)
        b = select.grid_search(small_bundle.problem, SMALL, threads=3)
        assert a.to_dict() == b.to_dict()

    def test_tie_goes_to_larger_beta_then_alpha(self, small_bundle, monkeypatch):
        class Dummy:
            converged, iterations = True, 1

        monkeypatch.setattr(select, "cell_elbo", lambda *a, **k: (1.0, Dummy()))
        res = select.grid_search(small_bundle.problem, SMALL)
        assert res.best[:2] == (0.1, 20.0)

    def test_failed_cells_excluded(self, small_bundle, monkeypatch):
        real = select.cell_elbo

        def flaky(problem, alpha, beta, *a, **k):
            if beta == 20.0:
                raise np.linalg.LinAlgError("boom")
            return real(problem, alpha, beta, *a, **k)

        monkeypatch.setattr(select, "cell_elbo", flaky)
        res = select.grid_search(small_bundle.problem, SMALL)
        failed = [row for row in res.table if row["error"]]
        assert len(failed) == 2 and res.best[1] != 20.0

    def test_all_failing_raises(self, small_bundle, monkeypatch):
        def broken(*a, **k):
            raise FloatingPointError("nope")

        monkeypatch.setattr(select, "cell_elbo", broken)
        with pytest.raises(RuntimeError, match="all 6 grid cells failed"):
            select.grid_search(small_bundle.problem, SMALL)

    def test_write(self, small_bundle, tmp_path):
        res = select.grid_search(small_bundle.problem, SMALL)
        res.write(tmp_path / "grid.csv", tmp_path / "best.json")
        header, rows = read_csv(tmp_path / "grid.csv")
        assert header == ["alpha", "beta", "elbo", "converged"] and len(rows) == 6
        assert read_json(tmp_path / "best.json")["best"]["beta"] == res.best[1]
