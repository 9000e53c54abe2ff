"""CLI contract tests: exit codes, artifacts, determinism, config validation."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from elsa_sim import cli

MINIMAL_CONFIG = """
[run]
seed = 9

[model]
vocab_size = 32
seq_len = 8
hidden_dim = 16
n_blocks = 3
n_heads = 2
lora_rank = 2
split = 1,1,1
n_classes = 4

[data]
n_samples = 240
n_eval = 64
alpha = 1000.0
n_poisoned = 0

[topology]
latency_min_ms = 20
latency_max_ms = 120
max_latency_ms = 200

[clustering]
probe_count = 6
warmup_steps = 4

[protocol]
n_clients = 3
n_edges = 1
rounds_per_global = 1
lr = 0.1
batch_size = 4
max_global_rounds = 3
conv_threshold = 1e-9

[codec]
mode = direct
"""


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text(MINIMAL_CONFIG)
    return path


def read_csv(path: Path):
    lines = path.read_text().splitlines()
    comments = [l for l in lines if l.startswith("#")]
    rows = [l.split(",") for l in lines if not l.startswith("#")]
    return comments, rows[0], rows[1:]


class TestRunCommand:
    def test_run_writes_log_and_summary(self, config_path, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["run", "--config", str(config_path),
                         "--out-dir", str(out)])
        assert code == 0
        comments, header, rows = read_csv(out / "training_log.csv")
        assert comments[0].startswith("# schema=elsa.training-log.v1")
        assert header[0] == "round"
        assert len(rows) == 3
        summary = json.loads((out / "summary.json").read_text())
        assert summary["method"] == "elsa"
        assert summary["n_rounds"] == 3
        assert summary["config"]["model"]["hidden_dim"] == 16
        assert summary["seed"] == 9

    def test_rerun_is_byte_identical(self, config_path, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["run", "--config", str(config_path),
                         "--out-dir", str(out1)]) == 0
        assert cli.main(["run", "--config", str(config_path),
                         "--out-dir", str(out2)]) == 0
        assert (out1 / "training_log.csv").read_bytes() == \
            (out2 / "training_log.csv").read_bytes()
        assert (out1 / "summary.json").read_bytes() == \
            (out2 / "summary.json").read_bytes()

    def test_baseline_fedavg(self, config_path, tmp_path):
        out = tmp_path / "fa"
        code = cli.main(["run", "--config", str(config_path),
                         "--out-dir", str(out), "--baseline", "fedavg"])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["method"] == "fedavg"

    def test_invalid_split_names_keys(self, tmp_path, capsys):
        bad = MINIMAL_CONFIG.replace("split = 1,1,1", "split = 1,1,2")
        path = tmp_path / "bad.ini"
        path.write_text(bad)
        code = cli.main(["run", "--config", str(path),
                         "--out-dir", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "split" in err and "n_blocks" in err

    def test_unknown_key_rejected_with_line(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text(MINIMAL_CONFIG.replace("[codec]\nmode = direct",
                                               "[codec]\nmode = direct\nfoo = 1"))
        code = cli.main(["run", "--config", str(path),
                         "--out-dir", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "foo" in err and "bad.ini" in err

    def test_unknown_section_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text(MINIMAL_CONFIG + "\n[extras]\nx = 1\n")
        code = cli.main(["run", "--config", str(path),
                         "--out-dir", str(tmp_path / "o")])
        assert code == 2
        assert "extras" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        code = cli.main(["run", "--config", str(tmp_path / "nope.ini"),
                         "--out-dir", str(tmp_path)])
        assert code == 2

    def test_seed_flag_overrides_config(self, config_path, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out1)])
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out2),
                  "--seed", "123"])
        s1 = json.loads((out1 / "summary.json").read_text())
        s2 = json.loads((out2 / "summary.json").read_text())
        assert s1["seed"] == 9 and s2["seed"] == 123

    def test_env_seed_override(self, config_path, tmp_path, monkeypatch):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        monkeypatch.setenv(cli.ENV_SEED, "77")
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out1)])
        s1 = json.loads((out1 / "summary.json").read_text())
        assert s1["seed"] == 77
        # explicit flag wins over the environment
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out2),
                  "--seed", "5"])
        s2 = json.loads((out2 / "summary.json").read_text())
        assert s2["seed"] == 5


class TestClusterCommand:
    def test_outputs(self, config_path, tmp_path):
        out = tmp_path / "cl"
        code = cli.main(["cluster", "--config", str(config_path),
                         "--out-dir", str(out)])
        assert code == 0
        comments, header, rows = read_csv(out / "assignment.csv")
        assert len(rows) == 3
        assert header == ["client", "status", "edge", "reason", "trust",
                          "mean_divergence"]
        for row in rows:
            assert row[1] in ("assigned", "excluded")
        _, dheader, drows = read_csv(out / "divergence.csv")
        mat = np.array([[float(v) for v in r] for r in drows])
        assert mat.shape == (3, 3)
        assert np.abs(mat - mat.T).max() < 1e-9
        assert np.abs(np.diag(mat)).max() == 0.0
        assert (out / "fingerprints.npz").exists()

    def test_rerun_byte_identical(self, config_path, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["cluster", "--config", str(config_path), "--out-dir", str(out1)])
        cli.main(["cluster", "--config", str(config_path), "--out-dir", str(out2)])
        for name in ("assignment.csv", "divergence.csv", "summary.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


class TestPrivacyCommand:
    def test_grid_rows_and_direct_row(self, config_path, tmp_path):
        out = tmp_path / "pr"
        code = cli.main(["privacy-eval", "--config", str(config_path),
                         "--out-dir", str(out)])
        assert code == 0
        _, header, rows = read_csv(out / "privacy.csv")
        by_mode = {}
        for row in rows:
            by_mode.setdefault(row[0], []).append(row)
        # all four modes present, ssop rows for each configured rank
        assert set(by_mode) == {"direct", "gaussian-noise", "sketch-only",
                                "ssop+sketch"}
        ranks = {row[1] for row in by_mode["ssop+sketch"]}
        assert ranks == {"8", "16"} or ranks == {"8"}
        cos_idx = header.index("cos_sim")
        mse_idx = header.index("mse")
        flag_idx = header.index("rho_independent")
        for row in by_mode["direct"]:
            assert float(row[cos_idx]) == 1.0
            assert float(row[mse_idx]) == 0.0
            assert row[flag_idx] == "yes"
        # rho-independent rows repeat identical metrics across the grid
        gauss = by_mode["gaussian-noise"]
        assert len({r[cos_idx] for r in gauss}) == 1
        assert all(r[flag_idx] == "yes" for r in gauss)

    def test_jobs_flag_deterministic(self, config_path, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["privacy-eval", "--config", str(config_path),
                  "--out-dir", str(out1)])
        cli.main(["privacy-eval", "--config", str(config_path),
                  "--out-dir", str(out2), "--jobs", "4"])
        assert (out1 / "privacy.csv").read_bytes() == \
            (out2 / "privacy.csv").read_bytes()


class TestCommModelCommand:
    def test_json_payload(self, config_path, tmp_path):
        out = tmp_path / "cm"
        code = cli.main(["comm-model", "--config", str(config_path),
                         "--out-dir", str(out)])
        assert code == 0
        doc = json.loads((out / "comm_model.json").read_text())
        assert doc["bytes_per_global_round"] > 0
        assert doc["total_time_s_at_max_rounds"] == pytest.approx(
            doc["n_rounds_assumed"] * doc["per_client_time_s"])


class TestBoundCommand:
    def test_worked_example(self, capsys):
        code = cli.main(["bound", "--lipschitz", "1", "--gap", "1",
                         "--sigma-local-sq", "1", "--sigma2-sq", "0.1",
                         "--rounds", "100"])
        assert code == 0
        out = capsys.readouterr().out
        assert "100,0.6" in out

    def test_descending_in_rounds(self, capsys):
        cli.main(["bound", "--lipschitz", "2", "--gap", "1.5",
                  "--sigma-local-sq", "0.5", "--sigma2-sq", "0.05",
                  "--rounds", "10,100,1000"])
        out = capsys.readouterr().out.splitlines()[1:]
        vals = [float(line.split(",")[1]) for line in out]
        assert vals[0] > vals[1] > vals[2]

    def test_empty_rounds_usage_error(self, capsys):
        code = cli.main(["bound", "--lipschitz", "1", "--gap", "1",
                         "--sigma-local-sq", "1", "--sigma2-sq", "0.1",
                         "--rounds", ","])
        assert code == 2

    def test_csv_artifact(self, tmp_path):
        code = cli.main(["bound", "--lipschitz", "1", "--gap", "1",
                         "--sigma-local-sq", "1", "--sigma2-sq", "0.1",
                         "--rounds", "100,400", "--out-dir", str(tmp_path)])
        assert code == 0
        _, header, rows = read_csv(tmp_path / "bound.csv")
        assert header == ["rounds", "bound"]
        assert len(rows) == 2
