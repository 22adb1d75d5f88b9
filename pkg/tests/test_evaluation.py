import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcl import evaluation as E
from deepcl.losses import hsac_gradient_weight
from deepcl.synthdata import SceneConfig, generate_dataset
from deepcl.tensor import DimensionError
from deepcl.training import ABLATIONS, TrainConfig

counts = st.integers(0, 10_000)


class TestConfusion:
    def test_perfect(self):
        gt = np.zeros(100, np.uint8)
        gt[:10] = 1
        assert E.confusion(gt, gt) == E.ConfusionMatrix(tp=10, tn=90, fp=0, fn=0)

    def test_complement(self):
        gt = (np.arange(50) % 3 == 0).astype(np.uint8)
        cm = E.confusion(1 - gt, gt)
        assert cm.tp == 0 and cm.tn == 0

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p, g = rng.integers(0, 2, (4, 4)), rng.integers(0, 2, (4, 4))
            tp = tn = fp = fn = 0
            for a, b in zip(p.ravel(), g.ravel()):
                tp += a and b
                tn += (not a) and (not b)
                fp += a and not b
                fn += b and not a
            assert E.confusion(p, g) == E.ConfusionMatrix(tp, tn, fp, fn)

    def test_total(self):
        cm = E.confusion(np.ones((3, 7)), np.zeros((3, 7)))
        assert cm.total == 21

    def test_addition(self):
        a = E.ConfusionMatrix(1, 2, 3, 4)
        assert a + a == E.ConfusionMatrix(2, 4, 6, 8)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            E.confusion(np.zeros(4), np.zeros(5))

    def test_non_binary(self):
        with pytest.raises(ValueError, match="binary"):
            E.confusion(np.array([0, 2]), np.array([0, 1]))


class TestMetrics:
    def test_single_tp(self):
        r = E.metrics(E.ConfusionMatrix(1, 0, 0, 0))
        assert (r.iou, r.precision, r.recall, r.f1) == (1, 1, 1, 1)

    def test_hand_example(self):
        r = E.metrics(E.ConfusionMatrix(tp=3, tn=0, fp=1, fn=2))
        assert r.iou == 0.5 and r.precision == 0.75 and r.recall == 0.6
        assert abs(r.f1 - 2 / 3) < 1e-15

    def test_empty_scene(self):
        r = E.metrics(E.ConfusionMatrix(0, 50, 0, 0))
        assert (r.iou, r.precision, r.recall, r.f1) == (1, 1, 1, 1)

    def test_zero_denominators(self):
        r = E.metrics(E.ConfusionMatrix(0, 5, 0, 3))  # nothing predicted, something missed
        assert (r.iou, r.precision, r.recall, r.f1) == (0, 0, 0, 0)
        r = E.metrics(E.ConfusionMatrix(0, 5, 2, 0))
        assert (r.iou, r.precision, r.recall, r.f1) == (0, 0, 0, 0)

    def test_negative(self):
        with pytest.raises(ValueError):
            E.metrics(E.ConfusionMatrix(-1, 0, 0, 0))

    @pytest.mark.parametrize("iou,f1", [(76.96, 86.98), (82.44, 90.37)])
    def test_published_rows(self, iou, f1):
        tp = round(iou * 100)
        rest = 10_000 - tp
        r = E.metrics(E.ConfusionMatrix(tp, 50_000, rest // 2, rest - rest // 2))
        assert abs(r.iou * 100 - iou) < 1e-9
        assert abs(r.f1 * 100 - f1) < 0.01

    @settings(max_examples=300)
    @given(counts, counts, counts, counts)
    def test_f1_iou_identity(self, tp, tn, fp, fn):
        r = E.metrics(E.ConfusionMatrix(tp, tn, fp, fn))
        assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) < 1e-12
        assert all(0 <= v <= 1 for v in (r.iou, r.precision, r.recall, r.f1))

    @settings(max_examples=200)
    @given(counts, counts, counts, counts, st.integers(1, 1000))
    def test_scale_invariant(self, tp, tn, fp, fn, k):
        a = E.metrics(E.ConfusionMatrix(tp, tn, fp, fn))
        b = E.metrics(E.ConfusionMatrix(k * tp, k * tn, k * fp, k * fn))
        for f in ("iou", "precision", "recall", "f1"):
            assert abs(getattr(a, f) - getattr(b, f)) < 1e-12


def exhaustive_sweep(d, y, grid):
    best, best_f1 = None, -1.0
    f1s = []
    for t in grid:
        f1 = E.metrics(E.confusion((d > t).astype(np.uint8), y)).f1
        f1s.append(f1)
        if f1 > best_f1:
            best, best_f1 = t, f1
    return best, f1s


class TestThresholdSweep:
    def test_default_grid(self):
        assert len(E.DEFAULT_GRID) == 201 and E.DEFAULT_GRID[0] == 0 and E.DEFAULT_GRID[-1] == 2
        assert np.allclose(np.diff(E.DEFAULT_GRID), 0.01)

    def test_separable(self):
        d = np.array([0.0] * 6 + [2.0] * 4)
        y = np.array([0] * 6 + [1] * 4)
        thre, reports = E.threshold_sweep(d, y)
        # the first grid point where only the changed pixels exceed the threshold
        assert thre == 0.0 and reports[0].f1 == 1.0
        assert all(r.f1 == 1.0 for r in reports[:-1]) and reports[-1].f1 == 0.0

    def test_separable_interior(self):
        d = np.array([0.3] * 6 + [1.5] * 4)
        y = np.array([0] * 6 + [1] * 4)
        thre, _ = E.threshold_sweep(d, y)
        assert thre == 0.3

    def test_all_unchanged(self):
        d = np.random.default_rng(0).uniform(0, 2, 50)
        thre, _ = E.threshold_sweep(d, np.zeros(50))
        assert thre == 2.0

    def test_list_input(self):
        rng = np.random.default_rng(1)
        maps = [rng.uniform(0, 2, (1, 4, 4)) for _ in range(3)]
        gts = [(m > 1.1).astype(np.uint8) for m in maps]
        thre, _ = E.threshold_sweep(maps, gts)
        assert thre == pytest.approx(max(m[m <= 1.1].max() for m in maps), abs=0.01)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        d = np.round(rng.uniform(0, 2, 40), 2)  # ties with grid points on purpose
        y = (rng.random(40) < 0.4).astype(np.uint8)
        y[0] = 1
        grid = E.DEFAULT_GRID
        thre, reports = E.threshold_sweep(d, y, grid)
        best, f1s = exhaustive_sweep(d, y, grid)
        assert thre == best
        np.testing.assert_allclose([r.f1 for r in reports], f1s, atol=1e-15)
        assert all(reports[list(grid).index(thre)].f1 >= r.f1 for r in reports)

    def test_empty(self):
        with pytest.raises(ValueError):
            E.threshold_sweep([], [])
        with pytest.raises(ValueError):
            E.threshold_sweep(np.zeros(3), np.zeros(3), grid=[])


class TestGradientWeightCurve:
    def test_columns_and_size(self):
        rows = E.gradient_weight_curve([0.2, 1.0])
        assert set(rows[0]) == {"tau", "y", "d_cos", "weight"}
        assert len(rows) == 2 * 2 * 201

    def test_point(self):
        rows = E.gradient_weight_curve([0.2], grid=[0.5])
        (w,) = [r["weight"] for r in rows if r["y"] == 1]
        assert abs(w - 0.924142) < 1e-6

    def test_large_tau_uniform(self):
        rows = E.gradient_weight_curve([50.0])
        assert max(abs(r["weight"] - 0.5) for r in rows) < 0.02

    def test_mirror(self):
        rows = E.gradient_weight_curve([0.2])
        w = {(r["y"], round(r["d_cos"], 6)): r["weight"] for r in rows}
        for (y, c), v in w.items():
            assert abs(v - w[(1 - y, round(-c, 6) + 0.0)]) < 1e-12

    def test_monotone(self):
        for tau in E.DEFAULT_TAUS:
            rows = E.gradient_weight_curve([tau])
            up = [r["weight"] for r in rows if r["y"] == 1]
            down = [r["weight"] for r in rows if r["y"] == 0]
            assert all(a <= b for a, b in zip(up, up[1:]))
            assert all(a >= b for a, b in zip(down, down[1:]))


# ---------------------------------------------------------------------------
# experiment drivers on a tiny benchmark


TINY = dict(epochs=1, stage_channels=(4, 4, 4, 4, 4), embed_dim=4)


@pytest.fixture(scope="module")
def tiny():
    return (generate_dataset(20, 0), generate_dataset(6, 1000),
            generate_dataset(4, 2000, SceneConfig.pseudo_only()))


class TestRunCell:
    def test_scores_both_paths(self, tiny):
        train, test, pseudo = tiny
        cell = E.run_cell(TrainConfig(**TINY), train, test, pseudo)
        assert set(cell["metric"]) >= {"iou", "precision", "recall", "f1"}
        assert cell["seg"] is not None
        assert 0 <= cell["pseudo_fpr_metric"] <= 1 and 0 <= cell["pseudo_fpr_seg"] <= 1
        assert cell["threshold"] in E.DEFAULT_GRID
        assert cell["aggregation"] == "pooled-pixels"

    def test_metric_only_has_no_seg(self, tiny):
        train, test, _ = tiny
        cell = E.run_cell(TrainConfig.for_ablation(1, **TINY), train, test)
        assert cell["seg"] is None and "pseudo_fpr_metric" not in cell

    def test_fpr(self):
        assert E.false_positive_rate(np.array([1, 0, 0, 0]), np.zeros(4)) == 0.25
        assert E.false_positive_rate(np.ones(3), np.ones(3)) == 0.0


class TestSweeps:
    def test_temperature_single_matches_direct_run(self, tiny):
        train, test, _ = tiny
        base = TrainConfig.for_ablation(2, **TINY)
        (row,) = E.temperature_sweep(base, [0.2], [5], train, test)
        direct = E.run_cell(replace(base, seed=5), train, test)
        assert row["tau"] == 0.2 and row["n"] == 1 and row["failed"] == []
        assert row["f1_mean"] == direct["metric"]["f1"] and row["f1_std"] == 0.0

    def test_temperature_mean_over_seeds(self, tiny, tmp_path):
        train, test, _ = tiny
        base = TrainConfig.for_ablation(2, **TINY)
        rows = E.temperature_sweep(base, [0.1, 10.0], [0, 1], train, test, out_dir=tmp_path)
        assert [r["tau"] for r in rows] == [0.1, 10.0]
        for r in rows:
            for m in ("precision", "recall", "f1", "iou"):
                vals = r[f"{m}_per_seed"]
                assert len(vals) == 2
                assert r[f"{m}_mean"] == pytest.approx(sum(vals) / 2, abs=1e-15)
                assert r[f"{m}_std"] == pytest.approx(abs(vals[0] - vals[1]) / math.sqrt(2), abs=1e-12)
        assert len(list((tmp_path / "cells").glob("*.json"))) == 4

    def test_temperature_failed_cell(self, tiny, monkeypatch):
        from deepcl import training as TR

        train, test, _ = tiny
        real = E.run_cell

        def flaky(cfg, *a, **k):
            if cfg.seed == 1:
                raise TR.TrainingError("step 0: loss component metric is nan")
            return real(cfg, *a, **k)

        monkeypatch.setattr(E, "run_cell", flaky)
        (row,) = E.temperature_sweep(TrainConfig.for_ablation(2, **TINY), [0.2], [0, 1], train, test)
        assert row["failed"] == [1] and row["n"] == 1

    def test_empty_seeds(self, tiny):
        train, test, _ = tiny
        with pytest.raises(ValueError):
            E.temperature_sweep(TrainConfig(**TINY), [0.2], [], train, test)
        with pytest.raises(ValueError):
            E.ablation_grid(TrainConfig(**TINY), train, test, [])

    def test_ablation_grid_shape_and_flags(self, tiny, tmp_path):
        train, test, pseudo = tiny
        rows = E.ablation_grid(TrainConfig(**TINY), train, test, [0], pseudo, out_dir=tmp_path)
        assert [r["row"] for r in rows] == [1, 2, 3, 4, 5, 6]
        for r in rows:
            assert (r["metric_loss"] or None, r["decoder"]) == ABLATIONS[r["row"]]
            assert (r["seg_path_f1"] is None) == (r["decoder"] == "none")
        cell = json.loads((tmp_path / "cells" / "ablation3_seed0.json").read_text())
        assert cell["config"]["use_metric_induction"] is False and cell["config"]["use_seg"] is True

    def test_cells_resume(self, tiny, tmp_path, monkeypatch):
        train, test, _ = tiny
        cells = [("a", TrainConfig.for_ablation(2, **TINY))]
        first = E.run_cells(cells, train, test, out_dir=tmp_path)
        stamp = (tmp_path / "cells" / "a.json").stat().st_mtime_ns

        def boom(*a, **k):
            raise AssertionError("cell should have been reused")

        monkeypatch.setattr(E, "run_cell", boom)
        again = E.run_cells(cells, train, test, out_dir=tmp_path)
        assert again == first
        assert (tmp_path / "cells" / "a.json").stat().st_mtime_ns == stamp
        # a different salt invalidates the cell
        with pytest.raises(AssertionError, match="reused"):
            E.run_cells(cells, train, test, out_dir=tmp_path, salt="v2")

    def test_cell_reproducible_from_seed(self, tiny):
        train, test, _ = tiny
        cfg = TrainConfig.for_ablation(4, seed=9, **TINY)
        a, b = E.run_cell(cfg, train, test), E.run_cell(cfg, train, test)
        for c in (a, b):
            c.pop("train_seconds"), c.pop("cell_seconds")
        assert a == b


def test_write_table(tmp_path):
    rows = [{"tau": 0.2, "f1": 0.5, "per_seed": [0.4, 0.6]}, {"tau": 1.0, "f1": 0.3, "per_seed": [0.3]}]
    E.write_table(rows, tmp_path / "t", {"seeds": [0, 1]})
    with open(tmp_path / "t.csv") as fh:
        got = list(csv.DictReader(fh))
    assert got[0]["tau"] == "0.2" and json.loads(got[0]["per_seed"]) == [0.4, 0.6]
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["rows"] == rows and doc["meta"]["aggregation"] == "pooled-pixels"
    assert doc["meta"]["seeds"] == [0, 1]


def test_weight_curve_matches_loss_module():
    for r in E.gradient_weight_curve([0.05, 10.0], grid=[-1, 0, 0.3]):
        assert r["weight"] == hsac_gradient_weight(r["d_cos"], r["y"], r["tau"])
