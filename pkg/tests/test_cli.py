import json
import subprocess
import sys

import pytest

BASE = [sys.executable, "-m", "cosam.cli"]


def run_cli(*args, cwd=None):
    return subprocess.run(BASE + list(args), capture_output=True, text=True, cwd=cwd)


FAST = ["--set", "dims=64", "--set", "epochs=1", "--set", "batch_size=4",
        "--set", "k_points=4", "--set", "t_iters=2",
        "--set", "data.n_domains=3", "--set", "data.per_domain=4",
        "--set", "data.master_seed=71"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated benchmark plus one trained checkpoint, shared by the
    read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "bench"
    r = run_cli("--preset", "toy", *FAST, "--out", str(data_dir), "gen-data")
    assert r.returncode == 0, r.stderr
    run_dir = root / "run"
    r = run_cli("--preset", "toy", *FAST, "--out", str(run_dir),
                "train", "--data", str(data_dir), "--source", "0", "--run-id", "t")
    assert r.returncode == 0, r.stderr
    ckpt = run_dir / "t" / ((run_dir / "t" / "latest").read_text())
    return {"root": root, "data": data_dir, "ckpt": ckpt}


class TestGenData:
    def test_layout(self, workspace):
        data_dir = workspace["data"]
        domains = sorted(p.name for p in data_dir.iterdir() if p.is_dir())
        assert domains == ["domain_A", "domain_B", "domain_C"]
        for d in domains:
            assert len(list((data_dir / d / "images").glob("*.png"))) == 4
            assert (data_dir / d / "manifest.json").exists()


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["root"] / "run" / "t"
        assert (run / "log.jsonl").exists()
        assert workspace["ckpt"].exists()


class TestEval:
    def test_writes_report(self, workspace, tmp_path):
        r = run_cli("--preset", "toy", *FAST, "--out", str(tmp_path),
                    "eval", "--ckpt", str(workspace["ckpt"]),
                    "--data", str(workspace["data"]),
                    "--exclude-source", "0", "--limit", "2")
        assert r.returncode == 0, r.stderr
        payload = json.loads((tmp_path / "eval.json").read_text())
        assert set(payload["per_domain"]) == {"domain_B", "domain_C"}
        assert 0.0 <= payload["average"] <= 1.0


class TestRefine:
    def test_trace_and_masks(self, workspace, tmp_path):
        img = workspace["data"] / "domain_B" / "images" / "00000.png"
        r = run_cli("--preset", "toy", *FAST, "--out", str(tmp_path),
                    "refine", "--ckpt", str(workspace["ckpt"]),
                    "--image", str(img), "--save-masks")
        assert r.returncode == 0, r.stderr
        trace = json.loads((tmp_path / "00000_trace.json").read_text())
        assert "n_w_sequence" in trace and "stop_reason" in trace
        if trace["stop_reason"] == "error-count-nondecreasing":
            assert trace["iterations"] >= 1


class TestLodo:
    def test_csv_and_determinism(self, workspace, tmp_path):
        r1 = run_cli("--preset", "toy", *FAST, "--out", str(tmp_path / "a"),
                     "lodo", "--data", str(workspace["data"]), "--sources", "0",
                     "--limit", "2")
        r2 = run_cli("--preset", "toy", *FAST, "--out", str(tmp_path / "b"),
                     "lodo", "--data", str(workspace["data"]), "--sources", "0",
                     "--limit", "2")
        assert r1.returncode == 0, r1.stderr
        assert r2.returncode == 0, r2.stderr
        a = (tmp_path / "a" / "lodo.csv").read_text()
        b = (tmp_path / "b" / "lodo.csv").read_text()
        assert a == b
        header = a.splitlines()[0].split(",")
        assert header[:2] == ["source", "seed"]
        assert header[-2:] == ["average", "average_coarse"]


class TestAblate:
    @pytest.mark.e2e
    def test_point_selection_axis(self, workspace, tmp_path):
        r = run_cli("--preset", "toy", *FAST, "--out", str(tmp_path),
                    "ablate", "--axis", "point-selection",
                    "--data", str(workspace["data"]), "--sources", "0",
                    "--limit", "2")
        assert r.returncode == 0, r.stderr
        csv_path = tmp_path / "ablation_point-selection.csv"
        assert csv_path.exists()
        assert (tmp_path / "ablation_point-selection.json").exists()
        assert (tmp_path / "ablation" / "fig_point-selection.svg").exists()
        # plot re-renders from the saved JSON
        r = run_cli("--out", str(tmp_path / "replot"), "plot",
                    "--results", str(tmp_path / "ablation_point-selection.json"))
        assert r.returncode == 0, r.stderr
        assert (tmp_path / "replot" / "ablation" / "fig_point-selection.svg").exists()


class TestExitCodes:
    def test_unknown_preset_is_config_error(self):
        r = run_cli("--preset", "bogus", "gen-data")
        assert r.returncode == 2

    def test_bad_override_is_config_error(self, tmp_path):
        r = run_cli("--set", "alpha=2.0", "--out", str(tmp_path), "gen-data")
        assert r.returncode == 2
        assert "alpha" in r.stderr

    def test_malformed_override_is_config_error(self, tmp_path):
        r = run_cli("--set", "alpha", "--out", str(tmp_path), "gen-data")
        assert r.returncode == 2

    def test_missing_data_is_data_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        r = run_cli("--preset", "toy", *FAST, "--out", str(tmp_path / "out"),
                    "lodo", "--data", str(empty), "--sources", "0", "--limit", "1")
        assert r.returncode == 3

    def test_unknown_command(self):
        r = run_cli("frobnicate")
        assert r.returncode == 2
