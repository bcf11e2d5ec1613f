import json

import pytest

from cosam.config import build_config
from cosam.data import generate_benchmark
from cosam.errors import ConfigError
from cosam.experiments import (
    DEFAULT_GRIDS,
    LOSS_LEVELS,
    PROMPT_SUBSETS,
    AblationSpec,
    ablation_csv,
    ablation_levels,
    emit_plots,
    lodo_csv,
    run_ablation,
    run_lodo,
)


@pytest.fixture(scope="module")
def tiny_bench():
    return generate_benchmark(3, 4, 64, 55)


def _fast_cfg(**kw):
    base = {"dims": 64, "epochs": 1, "batch_size": 4, "k_points": 4, "t_iters": 2,
            "data.per_domain": 4, "data.n_domains": 3}
    base.update(kw)
    return build_config("toy", overrides=base)


class TestAblationLevels:
    def test_loss_combination_enumeration(self):
        levels = ablation_levels(AblationSpec("loss-combination"))
        assert [n for n, _ in levels] == list(LOSS_LEVELS)
        assert levels[0][1]["t_iters"] == 1  # prompt-free row never iterates

    def test_prompt_subsets_complete(self):
        assert len(PROMPT_SUBSETS) == 7
        levels = ablation_levels(AblationSpec("prompt-combination"))
        assert len(levels) == 7
        # every level enables exactly the kinds named in it
        for name, ov in levels:
            kinds = set(name.split("+"))
            assert ov["use_points"] == ("points" in kinds)
            assert ov["use_box"] == ("box" in kinds)
            assert ov["use_mask"] == ("mask" in kinds)

    def test_point_selection(self):
        levels = ablation_levels(AblationSpec("point-selection"))
        assert [n for n, _ in levels] == ["topk", "random"]

    def test_hyper_parameter_default_grid(self):
        for p, grid in DEFAULT_GRIDS.items():
            levels = ablation_levels(AblationSpec("hyper-parameter", parameter=p))
            assert [ov[p] for _, ov in levels] == grid

    def test_hyper_parameter_custom_levels(self):
        levels = ablation_levels(
            AblationSpec("hyper-parameter", parameter="alpha", levels=[0.05, 0.15]))
        assert [ov["alpha"] for _, ov in levels] == [0.05, 0.15]

    def test_unknown_axis_and_levels_rejected(self):
        with pytest.raises(ConfigError):
            ablation_levels(AblationSpec("bogus"))
        with pytest.raises(ConfigError):
            ablation_levels(AblationSpec("loss-combination", levels=["bogus"]))
        with pytest.raises(ConfigError):
            ablation_levels(AblationSpec("hyper-parameter", parameter="lr"))
        with pytest.raises(ConfigError):
            ablation_levels(AblationSpec("prompt-combination", levels=["points+bogus"]))


class TestRunLodo:
    def test_rows_and_csv(self, tiny_bench, tmp_path):
        cfg = _fast_cfg()
        rows = run_lodo(tiny_bench, cfg, out_dir=tmp_path, eval_limit=2)
        assert len(rows) == 3
        for i, row in enumerate(rows):
            assert row["source"] == tiny_bench[i].domain_id
            assert set(row["per_domain"]) == {
                d.domain_id for j, d in enumerate(tiny_bench) if j != i}
            assert 0.0 <= row["average"] <= 1.0
        csv_text = lodo_csv(rows, [d.domain_id for d in tiny_bench])
        lines = csv_text.splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("source,seed,")
        # source column of each row is blank in the table body
        for i, line in enumerate(lines[1:]):
            cells = line.split(",")
            assert cells[0] == tiny_bench[i].domain_id
            assert cells[2 + i] == ""  # no self-evaluation entry

    def test_cell_cache_reused(self, tiny_bench, tmp_path, monkeypatch):
        cfg = _fast_cfg()
        run_lodo(tiny_bench, cfg, out_dir=tmp_path, sources=[0], eval_limit=2)
        cells = list((tmp_path / "cells").glob("*.json"))
        assert len(cells) == 1

        import cosam.experiments as ex

        def boom(*a, **k):
            raise AssertionError("retrained a cached cell")

        monkeypatch.setattr(ex, "fit", boom)
        rows = run_lodo(tiny_bench, cfg, out_dir=tmp_path, sources=[0], eval_limit=2)
        assert rows[0]["source"] == tiny_bench[0].domain_id

    def test_cache_keyed_by_config(self, tiny_bench, tmp_path):
        run_lodo(tiny_bench, _fast_cfg(), out_dir=tmp_path, sources=[0], eval_limit=2)
        run_lodo(tiny_bench, _fast_cfg(alpha=0.3), out_dir=tmp_path,
                 sources=[0], eval_limit=2)
        assert len(list((tmp_path / "cells").glob("*.json"))) == 2

    def test_deterministic_csv(self, tiny_bench, tmp_path):
        cfg = _fast_cfg()
        domains = [d.domain_id for d in tiny_bench]
        a = lodo_csv(run_lodo(tiny_bench, cfg, out_dir=tmp_path / "a",
                              sources=[1], eval_limit=2), domains)
        b = lodo_csv(run_lodo(tiny_bench, cfg, out_dir=tmp_path / "b",
                              sources=[1], eval_limit=2), domains)
        assert a == b

    def test_multiple_seeds(self, tiny_bench, tmp_path):
        cfg = _fast_cfg()
        rows = run_lodo(tiny_bench, cfg, out_dir=tmp_path, sources=[0],
                        seeds=[0, 1], eval_limit=2)
        assert [r["seed"] for r in rows] == [0, 1]


class TestRunAblation:
    def test_point_selection_axis(self, tiny_bench, tmp_path):
        cfg = _fast_cfg()
        results = run_ablation(
            AblationSpec("point-selection"), tiny_bench, cfg,
            out_dir=tmp_path, sources=[0], eval_limit=2)
        assert [r["level"] for r in results] == ["topk", "random"]
        csv_text = ablation_csv(results)
        lines = csv_text.splitlines()
        assert lines[0] == "level,average,average_coarse,n_rows"
        assert len(lines) == 3

    def test_results_serializable(self, tiny_bench, tmp_path):
        cfg = _fast_cfg()
        results = run_ablation(
            AblationSpec("hyper-parameter", parameter="t_iters", levels=[1, 2]),
            tiny_bench, cfg, out_dir=tmp_path, sources=[0], eval_limit=2)
        json.dumps(results)  # must not raise


class TestEmitPlots:
    def _fake_results(self, levels):
        return [{"level": l, "average": 0.5 + 0.01 * i, "average_coarse": 0.4,
                 "rows": []} for i, l in enumerate(levels)]

    def test_bar_chart_written(self, tmp_path):
        paths = emit_plots(self._fake_results(["a", "b"]), "loss-combination", tmp_path)
        assert len(paths) == 1
        assert paths[0].suffix == ".svg"
        assert paths[0].exists()
        assert "<svg" in paths[0].read_text()[:500]

    def test_line_plot_for_hyper_parameter(self, tmp_path):
        paths = emit_plots(
            self._fake_results(["alpha=0.1", "alpha=0.2"]),
            "hyper-parameter-alpha", tmp_path)
        assert paths[0].exists()

    def test_empty_results_warns(self, tmp_path):
        with pytest.warns(UserWarning):
            assert emit_plots([], "loss-combination", tmp_path) == []
