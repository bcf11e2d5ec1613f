import numpy as np
import pytest
import torch

from cosam import losses
from cosam.data import generate_benchmark
from cosam.errors import InputError
from cosam.metrics import dsc, evaluate, mean_class_report
from cosam.model import build_model


class TestDsc:
    def test_identity(self):
        m = (np.random.default_rng(0).random((16, 16)) < 0.5).astype(np.uint8)
        assert dsc(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8), np.uint8)
        b = np.zeros((8, 8), np.uint8)
        a[0, 0] = 1
        b[7, 7] = 1
        assert dsc(a, b) == 0.0

    def test_empty_empty(self):
        z = np.zeros((4, 4), np.uint8)
        assert dsc(z, z) == 1.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.zeros((4, 4), np.uint8)
        a[0, :2] = 1  # 2 px
        b[0, 1:3] = 1  # 2 px, 1 shared
        assert dsc(a, b) == pytest.approx(0.5)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = (rng.random((12, 12)) < 0.4).astype(np.uint8)
            b = (rng.random((12, 12)) < 0.4).astype(np.uint8)
            assert dsc(a, b) == dsc(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            dsc(np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8))

    def test_matches_soft_dice_at_zero_eps(self):
        """1 - dice_loss(pred, label, eps->0) on hard masks equals DSC."""
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = (rng.random((10, 10)) < 0.5).astype(np.uint8)
            b = (rng.random((10, 10)) < 0.5).astype(np.uint8)
            soft = 1.0 - float(losses.dice_loss(
                torch.as_tensor(a, dtype=torch.float64),
                torch.as_tensor(b, dtype=torch.float64), eps=1e-12))
            assert soft == pytest.approx(dsc(a, b), abs=1e-9)


@pytest.fixture(scope="module")
def small_bench():
    return generate_benchmark(3, 4, 64, 31)


@pytest.fixture(scope="module")
def model():
    return build_model(seed=19)


class TestEvaluate:
    def test_report_structure(self, model, small_bench):
        rep = evaluate(model, small_bench[1:], k=4, t_iters=2)
        assert set(rep.per_domain_mean) == {d.domain_id for d in small_bench[1:]}
        assert len(rep.per_sample) == 8
        assert rep.failures == []
        for v in rep.per_domain_mean.values():
            assert 0.0 <= v <= 1.0
        expected = np.mean(list(rep.per_domain_mean.values()))
        assert rep.overall == pytest.approx(expected)

    def test_limit(self, model, small_bench):
        rep = evaluate(model, small_bench[1:], k=4, t_iters=1, limit=2)
        assert len(rep.per_sample) == 4

    def test_grouping_identity_when_groups_unique(self, model, small_bench):
        plain = evaluate(model, small_bench[1:2], k=4, t_iters=1)
        grouped = evaluate(model, small_bench[1:2], k=4, t_iters=1,
                           group_key=lambda s: s.sample_id)
        assert grouped.overall == pytest.approx(plain.overall)

    def test_grouping_changes_weighting(self, model, small_bench):
        """Putting all but one sample in one group re-weights the mean."""
        plain = evaluate(model, small_bench[1:2], k=4, t_iters=1)
        per = [r["dsc"] for r in plain.per_sample]
        grouped = evaluate(model, small_bench[1:2], k=4, t_iters=1,
                           group_key=lambda s: "solo" if s.sample_id == "00000" else "rest")
        expected = 0.5 * (per[0] + np.mean(per[1:]))
        assert grouped.overall == pytest.approx(expected)

    def test_deterministic(self, model, small_bench):
        a = evaluate(model, small_bench[1:], k=4, t_iters=2)
        b = evaluate(model, small_bench[1:], k=4, t_iters=2)
        assert a.per_sample == b.per_sample
        assert a.overall == b.overall

    def test_empty_targets_rejected(self, model):
        with pytest.raises(InputError):
            evaluate(model, [], k=4, t_iters=1)

    def test_failures_recorded_not_fatal(self, model, small_bench, monkeypatch):
        calls = {"n": 0}
        import cosam.metrics as m

        real = m.refine

        def flaky(image, *args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("synthetic failure")
            return real(image, *args, **kwargs)

        monkeypatch.setattr(m, "refine", flaky)
        rep = evaluate(model, small_bench[1:2], k=4, t_iters=1)
        assert len(rep.failures) == 1
        assert rep.failures[0]["reason"] == "synthetic failure"
        assert len(rep.per_sample) == 3


class TestMeanClassReport:
    def test_combination(self):
        from cosam.metrics import MetricsReport

        a = MetricsReport(per_domain_mean={"d1": 0.8, "d2": 0.6})
        b = MetricsReport(per_domain_mean={"d1": 0.4, "d2": 0.2})
        out = mean_class_report([a, b])
        assert out["d1"] == pytest.approx(0.6)
        assert out["d2"] == pytest.approx(0.4)
        assert out["overall"] == pytest.approx(0.5)

    def test_empty(self):
        assert mean_class_report([]) == {"overall": 0.0}
