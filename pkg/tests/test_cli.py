import csv
import json
from pathlib import Path

import numpy as np
import pytest

from sfm_lab import arrayio, cli


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


class TestSimulateCommand:
    def test_zero_snapshots_is_config_error(self, tmp_path):
        code = run_cli("simulate", "--out", tmp_path / "t", "--snapshots", 0,
                       "--grid-n", 32, "--tau", 5)
        assert code == cli.EXIT_CONFIG
        assert not (tmp_path / "t").exists()  # no files written

    def test_simulate_and_skip_on_rerun(self, tmp_path, capsys):
        args = ["simulate", "--out", tmp_path / "t", "--snapshots", 3, "--grid-n", 32,
                "--tau", 5, "--trajectories", 1, "--spinup", 0.2, "--dt", "2e-3",
                "--save-every", 0.05]
        assert run_cli(*args) == 0
        manifest = tmp_path / "t" / "tau5" / "traj000" / "manifest.json"
        assert manifest.is_file()
        before = manifest.read_bytes()
        capsys.readouterr()
        assert run_cli(*args) == 0
        assert "skip" in capsys.readouterr().out
        assert manifest.read_bytes() == before

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("simulate", "--does-not-exist", 1)
        assert exc.value.code == 2


class TestConfigPrecedence:
    def test_config_file_overridden_by_flag(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"snapshots": 2, "grid-n": 32, "tau": [5.0],
                                        "trajectories": 1, "spinup": 0.1,
                                        "dt": 2e-3, "save-every": 0.05,
                                        "out": str(tmp_path / "from_config")}))
        assert run_cli("simulate", "--config", cfg_file) == 0
        assert (tmp_path / "from_config" / "tau5" / "traj000" / "manifest.json").is_file()

        assert run_cli("simulate", "--config", cfg_file, "--out",
                       tmp_path / "from_flag") == 0
        assert (tmp_path / "from_flag" / "tau5" / "traj000" / "manifest.json").is_file()

    def test_data_dir_env_resolves_relative_paths(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SFM_LAB_DATA_DIR", str(tmp_path))
        assert run_cli("simulate", "--out", "rel_out", "--snapshots", 2,
                       "--grid-n", 32, "--tau", 3, "--trajectories", 1,
                       "--spinup", 0.1, "--dt", "2e-3", "--save-every", 0.05) == 0
        assert (tmp_path / "rel_out" / "tau3" / "traj000" / "manifest.json").is_file()


class TestErrorCategories:
    def test_missing_dataset_is_io_error(self, tmp_path):
        code = run_cli("train", "--dataset", tmp_path / "nope.json",
                       "--out", tmp_path / "run", "--scheme", "sfm", "--steps", 1)
        assert code == cli.EXIT_IO

    def test_blowup_is_numeric_error(self, tmp_path):
        # a wildly unstable timestep must surface as a categorized failure
        code = run_cli("simulate", "--out", tmp_path / "t", "--tau", 5,
                       "--trajectories", 1, "--snapshots", 40, "--grid-n", 32,
                       "--dt", 0.5, "--save-every", 0.5, "--spinup", 0)
        assert code == cli.EXIT_NUMERIC

    def test_bad_scheme_config_is_config_error(self, tmp_path):
        code = run_cli("train", "--dataset", tmp_path / "nope.json",
                       "--out", tmp_path / "run", "--scheme", "sfm",
                       "--steps", 1, "--beta", 2.0)
        assert code == cli.EXIT_CONFIG


class TestTableCommand:
    def fake_report(self, path: Path, scheme: str, tau: float, value: float):
        payload = {
            "kind": "report",
            "scheme": scheme,
            "n_cases": 4,
            "n_members": 2,
            "channel_names": ["zeta_h"],
            "scores": {"zeta_h": {"rmse": value, "crps": value / 2, "mae": value / 3,
                                  "ssr": 0.5 if scheme != "regression" else None}},
            "spectra": {},
            "metadata": {"tau": tau},
        }
        path.mkdir(parents=True, exist_ok=True)
        arrayio.write_manifest(path / "report.json", payload)

    def test_table_schema_matches_scheme_by_tau_layout(self, tmp_path):
        schemes = ["cfm", "cdm", "regression", "corrdiff", "sfm"]
        runs = []
        for tau in (3.0, 5.0, 10.0):
            for i, scheme in enumerate(schemes):
                d = tmp_path / f"run_{scheme}_t{tau:g}"
                self.fake_report(d, scheme, tau, value=1.0 + i)
                runs.append(d)
        out = tmp_path / "table.csv"
        assert run_cli("table", "--runs", *runs, "--out", out) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        assert header[:2] == ["variable", "metric"]
        expected_cols = [f"tau={t:g}/{s}" for t in (3, 5, 10) for s in schemes]
        assert header[2:] == expected_cols
        assert [r[1] for r in rows[1:]] == ["rmse", "crps", "mae", "ssr"]
        assert all(r[0] == "zeta_h" for r in rows[1:])
        ssr_row = rows[4]
        assert ssr_row[2 + 2] == ""  # deterministic regression leaves SSR empty

    def test_duplicate_reports_rejected(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        self.fake_report(a, "sfm", 5.0, 1.0)
        self.fake_report(b, "sfm", 5.0, 2.0)
        assert run_cli("table", "--runs", a, b, "--out", tmp_path / "t.csv") == cli.EXIT_CONFIG


@pytest.mark.slow
class TestPipelineSmoke:
    def test_end_to_end_smoke(self, tmp_path):
        """simulate -> build -> train sfm 200 steps -> sample m=4 -> evaluate."""
        root = tmp_path
        assert run_cli("simulate", "--out", root / "traj", "--tau", 5,
                       "--trajectories", 2, "--snapshots", 50, "--grid-n", 32,
                       "--spinup", 1.0, "--seed", 0, "--threads", 2) == 0
        assert run_cli("build", "--trajectories", root / "traj" / "tau5",
                       "--out", root / "ds", "--n-train", 60, "--n-test", 16,
                       "--seed", 0) == 0
        assert run_cli("train", "--dataset", root / "ds" / "manifest.json",
                       "--out", root / "run", "--scheme", "sfm", "--steps", 200,
                       "--batch-size", 4, "--hidden", 12, "--n-blocks", 2,
                       "--lr", "1e-3", "--seed", 1) == 0
        assert (root / "run" / "train_log.csv").is_file()
        config = arrayio.read_manifest(root / "run" / "config.json")
        assert config["scheme"]["scheme"] == "sfm"

        assert run_cli("sample", "--run", root / "run", "--members", 4,
                       "--cases", 4, "--sample-steps", 10, "--seed", 2) == 0
        members = arrayio.read_field_array(root / "run" / "samples" / "members.npy")
        assert members.shape == (4, 4, 1, 32, 32)

        assert run_cli("evaluate", "--run", root / "run") == 0
        report = arrayio.read_manifest(root / "run" / "report.json")
        scores = report["scores"]["zeta_h"]
        for metric in ("rmse", "crps", "mae", "ssr"):
            assert scores[metric] is not None and np.isfinite(scores[metric])

        # idempotency: completed stages skip unless forced
        assert run_cli("train", "--dataset", root / "ds" / "manifest.json",
                       "--out", root / "run", "--scheme", "sfm", "--steps", 200) == 0
        assert run_cli("sample", "--run", root / "run", "--members", 4) == 0
