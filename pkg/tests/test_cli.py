import json

import pytest

from byzfl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from tests.conftest import make_experiment


@pytest.fixture
def write_config(tmp_path):
    def write(cfg):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    return write


class TestCommands:
    """Test the command line surface"""

    def test_expand_prints_trials(self, write_config, capsys):
        """One JSON line per trial"""
        path = write_config(make_experiment(num_clients={"grid_search": [5, 6, 7]}))
        assert main(["expand", path]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert [json.loads(line)["trial_id"] for line in lines] == [0, 1, 2]

    def test_list_aggregators(self, capsys):
        """Every aggregator is printed"""
        assert main(["list", "aggregators"]) == EXIT_OK
        assert "signguard" in capsys.readouterr().out

    def test_run(self, write_config, tmp_path, no_timing):
        """run writes CSVs and the manifest"""
        out = tmp_path / "out"
        assert main(["--threads", "2", "run", write_config(make_experiment()), "--out", str(out), "--seed", "11"]) == EXIT_OK
        assert (out / "trial_0000.csv").exists()
        assert json.loads((out / "manifest.json").read_text())[0]["status"] == "ok"

    def test_config_error_exit_code(self, write_config):
        """Invalid configs exit with 1"""
        assert main(["expand", write_config(make_experiment(num_clients=0))]) == EXIT_CONFIG

    def test_missing_file_exit_code(self, tmp_path):
        """An unreadable config exits with 1"""
        assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_trial_failure_exit_code(self, write_config, tmp_path):
        """A failed trial exits with 2"""
        cfg = make_experiment(num_clients=500, data_config={"dataset": {"per_class": 10}})
        assert main(["run", write_config(cfg), "--out", str(tmp_path / "out")]) == EXIT_RUNTIME
