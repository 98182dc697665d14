import numpy as np
import pytest

from siamzero import evalsuite as ev
from siamzero import nnkernel as nk
from siamzero import toygen
from siamzero.pairs import pair_counts


class TestSplits:
    def test_charset_disjoint_and_deterministic(self):
        a = ev.split_charset(20, 7, seed=3)
        assert a == ev.split_charset(20, 7, seed=3)
        assert len(a.seen) == 7 and len(a.unseen) == 13
        assert not set(a.seen) & set(a.unseen)
        assert a.all_classes == tuple(range(20))
        assert a != ev.split_charset(20, 7, seed=4)

    def test_closed_set_allowed(self):
        split = ev.split_charset([3, 1, 2], 3, seed=0)
        assert split.seen == (1, 2, 3) and split.unseen == ()

    @pytest.mark.parametrize("c_seen", [0, 6])
    def test_charset_bounds(self, c_seen):
        with pytest.raises(ValueError):
            ev.split_charset(5, c_seen, seed=0)

    def test_samples_partition(self):
        labels = np.repeat(np.arange(4), 8)
        train, test = ev.split_samples(labels, 0.25, seed=2)
        assert not set(train) & set(test)
        assert sorted(np.concatenate([train, test])) == list(range(32))
        np.testing.assert_array_equal(np.bincount(labels[test]), [2, 2, 2, 2])
        t2, s2 = ev.split_samples(labels, 0.25, seed=2)
        np.testing.assert_array_equal(train, t2)
        np.testing.assert_array_equal(test, s2)

    def test_samples_fraction_bounds(self):
        with pytest.raises(ValueError):
            ev.split_samples([0, 1], 1.0, seed=0)


class TestSchedule:
    def test_scripted_plateaus(self):
        sched = ev.PlateauSchedule(0.1, decay=0.1, patience=3, max_decays=2)
        lrs = []
        for k, metric in enumerate([0.5] + [0.4] * 9):
            sched.step(metric)
            lrs.append(sched.lr)
            assert sched.stop == (k == 9)
        np.testing.assert_allclose(lrs, [0.1] * 3 + [0.01] * 3 + [0.001] * 4)

    def test_improvement_resets_patience(self):
        sched = ev.PlateauSchedule(1.0, patience=2)
        for metric in (0.1, 0.1, 0.2, 0.2, 0.3):
            sched.step(metric)
        assert sched.lr == 1.0 and sched.best == 0.3

    def test_config_validation(self):
        with pytest.raises(ValueError, match="batch_size"):
            ev.TrainConfig(batch_size=0).validate()
        with pytest.raises(ValueError, match="lr_decay"):
            ev.TrainConfig(lr_decay=1.0).validate()
        assert ev.TrainConfig(weight_decay=0.0).validate().weight_decay == 0.0


def _report(confusion, exemplars=None):
    return ev.EvalReport({c: None for c in ev.COLUMNS}, {}, confusion, exemplars or {})


class TestErrorReport:
    def test_empty(self):
        assert ev.error_report(_report({})) == []

    def test_injected_cell_ranks_first(self):
        confusion = {(2, 5): 7, (1, 0): 2, (3, 4): 2, (0, 1): 1}
        cells = ev.error_report(_report(confusion, {(2, 5): "x.pgm"}), k=3)
        assert [(c.truth, c.prediction, c.count) for c in cells] == [(2, 5, 7), (1, 0, 2), (3, 4, 2)]
        assert cells[0].exemplar == "x.pgm"

    def test_k_larger_than_cells(self):
        assert len(ev.error_report(_report({(0, 1): 1, (1, 0): 1}), k=10)) == 2


class TestEvaluate:
    @pytest.fixture(scope="class")
    @staticmethod
    def report(spec, toy6, trained_small):
        data, templates = toy6
        split = ev.split_charset(6, 4, seed=5)
        return ev.evaluate(trained_small, spec, split, data, templates), split, data

    def test_combined_column(self, report):
        rep, split, data = report
        (cs, ns), (cu, nu), (c, n) = rep.counts["Ds|C"], rep.counts["Du|C"], rep.counts["D|C"]
        assert n == ns + nu == len(data)
        expected = (ns * rep.accuracy["Ds|C"] + nu * rep.accuracy["Du|C"]) / n
        assert rep.accuracy["D|C"] == pytest.approx(expected, abs=1e-12)

    def test_restriction_never_hurts(self, report):
        rep, _, _ = report
        assert rep.accuracy["Ds|Cs"] >= rep.accuracy["Ds|C"]
        assert rep.accuracy["Du|Cu"] >= rep.accuracy["Du|C"]

    def test_confusion_totals(self, report):
        rep, _, _ = report
        c, n = rep.counts["D|C"]
        assert sum(rep.confusion.values()) == n - c
        assert all(t != p for t, p in rep.confusion)

    def test_templates_classify_themselves(self, spec, toy6, trained_small):
        _, templates = toy6
        as_data = ev.GlyphData(templates.images, templates.class_ids)
        rep = ev.evaluate(trained_small, spec, ev.split_charset(6, 4, seed=5), as_data, templates)
        assert all(rep.accuracy[c] == 1.0 for c in ev.COLUMNS)

    def test_closed_set_has_empty_unseen_columns(self, spec, toy6, trained_small):
        data, templates = toy6
        rep = ev.evaluate(trained_small, spec, ev.split_charset(6, 6, seed=0), data.subset(range(8)), templates)
        assert rep.accuracy["Du|Cu"] is None and rep.row()[2] == ""

    def test_rejects_outside_classes(self, spec, toy6, trained_small):
        data, templates = toy6
        with pytest.raises(ValueError, match="outside the split"):
            ev.evaluate(trained_small, spec, ev.SplitSpec(2, 0, (0,), (1,)), data, templates)

    def test_report_tsv(self, report, tmp_path):
        rep, _, _ = report
        ev.write_report_tsv(rep, tmp_path / "r.tsv", 4, 2)
        header, row = (tmp_path / "r.tsv").read_text().splitlines()
        assert header.split("\t") == ["c", "n", *ev.COLUMNS]
        assert row.split("\t")[:2] == ["4", "2"]


class TestTraining:
    @pytest.fixture(scope="class")
    @staticmethod
    def runs(spec, toy6):
        data, templates = toy6
        cfg = ev.TrainConfig(batch_size=8, max_epochs=2, n=2, seed=11)
        return [ev.run_experiment(data, templates, spec, cfg, c_seen=4) for _ in range(2)]

    def test_deterministic_steps(self, runs):
        a, b = runs
        assert len(a.result.step_losses) >= 10
        assert a.result.step_losses[:10] == b.result.step_losses[:10]
        assert a.report.row() == b.report.row()

    def test_history_and_best_snapshot(self, runs, tmp_path):
        res = runs[0].result
        assert [r.epoch for r in res.history] == [0, 1, 2]
        assert np.isnan(res.history[0].train_loss)
        best = max(range(len(res.history)), key=lambda k: (res.history[k].monitor_acc, -k))
        assert res.best_epoch == best
        ev.write_history_csv(res.history, tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,monitor_acc"

    def test_head_stays_nonpositive(self, runs):
        assert (runs[0].result.params["head.w"] <= 0).all()

    def test_pairs_cover_seen_only(self, runs, toy6):
        exp = runs[0]
        train_labels = toy6[0].labels[exp.train_idx]
        sizes = [int((train_labels == c).sum()) for c in exp.split.seen]
        assert exp.pairs.counts() == pair_counts(4, sizes, 2)
        assert {r.template_class for r in exp.pairs} == set(exp.split.seen)

    def test_monitor_improves(self, spec):
        toy = toygen.make_toy(10, 20, seed=7)
        data, templates = ev.from_images(toy.templates, toy.samples, toy.labels)
        cfg = ev.TrainConfig(batch_size=32, max_epochs=4, n=3, seed=1)
        exp = ev.run_experiment(data, templates, spec, cfg, c_seen=6)
        accs = [r.monitor_acc for r in exp.result.history]
        assert max(accs[1:]) > accs[0]


class TestSoftmaxBaseline:
    def test_single_class_is_trivially_right(self, spec, fresh_params, toy6):
        data, _ = toy6
        one = data.of_classes([2])
        res = ev.train_softmax_baseline(fresh_params, spec, one, [2], ev.TrainConfig(batch_size=8, max_epochs=1))
        assert ev.evaluate_closed(res.params, spec, one, [2]) == 1.0
        assert "head.w" not in res.params and res.params["cls.w"].shape == (128, 1)

    def test_backbone_not_mutated(self, spec, fresh_params, toy6):
        data, _ = toy6
        before = fresh_params["fc.w"].copy()
        ev.train_softmax_baseline(fresh_params, spec, data.of_classes([0, 1]), [0, 1],
                                  ev.TrainConfig(batch_size=8, max_epochs=1))
        np.testing.assert_array_equal(fresh_params["fc.w"], before)

    @pytest.mark.parametrize("seed", range(3))
    def test_cross_entropy_gradient(self, seed):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        labels = rng.integers(0, k, n)

        def fn(d):
            loss, dz = nk.softmax_cross_entropy(d["z"], labels)
            return loss, {"z": dz}

        res = nk.grad_check(fn, {"z": rng.standard_normal((n, k)) * 2}, seed=seed)
        assert res.max_error < 1e-2

    def test_cross_entropy_oracle(self):
        z = np.array([[1.0, 2.0, 0.5]])
        loss, dz = nk.softmax_cross_entropy(z, np.array([1]))
        p = np.exp(z) / np.exp(z).sum()
        assert loss == pytest.approx(-np.log(p[0, 1]))
        np.testing.assert_allclose(dz, p - [[0, 1, 0]], rtol=1e-6)
