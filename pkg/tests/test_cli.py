import json

import numpy as np
import pytest

from ensemble_ddm import cli
from ensemble_ddm.experiments import ConfigError, ExperimentConfig, parse_config_text

SMALL_MASS = ["--set", "mass_h=1/4,1/8", "--set", "mass_J=3"]


def _run(tmp_path, *args):
    return cli.main(["run", *args, "--out", str(tmp_path / "out")])


def test_unknown_key_is_config_error(tmp_path, capsys):
    assert _run(tmp_path, "mass_conservation", "--set", "bogus=1") == 1
    assert "unknown config key" in capsys.readouterr().err


@pytest.mark.parametrize("override", ["mass_J=ten", "nu=-1", "tol=-3", "coupling=x",
                                      "robin_mode=best", "mass_h=0", "z=1", "novalue"])
def test_bad_values_are_config_errors(tmp_path, override):
    assert _run(tmp_path, "mass_conservation", "--set", override) == 1


def test_bad_thread_count(tmp_path):
    assert _run(tmp_path, "mass_conservation", "--threads", "0") == 1


def test_missing_config_file(tmp_path):
    assert _run(tmp_path, "mass_conservation", "--config", str(tmp_path / "nope.cfg")) == 1


def test_unknown_experiment_exits_with_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        _run(tmp_path, "table99")
    assert exc.value.code == 2


def test_config_file_parsing():
    items = parse_config_text("# comment\nnu = 2  # trailing\n\nsamples=1,2\n")
    assert items == {"nu": "2", "samples": "1,2"}
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign here\n")
    cfg = ExperimentConfig().updated({"nu": "1/2", "table73": "false", "J0": "7"})
    assert cfg.nu == 0.5 and cfg.table73 is False and cfg.J0 == 7


def test_run_writes_manifest_and_csv(tmp_path):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("mass_J = 3\n")
    assert _run(tmp_path, "mass_conservation", "--config", str(cfgfile),
                "--set", "mass_h=1/4,1/8", "--threads", "1", "--seed", "4") == 0
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["experiment"] == "mass_conservation"
    assert man["seed"] == 4 and man["config"]["mass_J"] == 3
    assert len(man["config_hash"]) == 64
    rows = (tmp_path / "out" / "mass_conservation.csv").read_text().splitlines()
    assert rows[0] == "h,J,max_mismatch,mean_mismatch" and len(rows) == 3


def test_csv_output_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        assert cli.main(["run", "mass_conservation", *SMALL_MASS, "--threads", "1",
                         "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "mass_conservation.csv").read_bytes())
    assert outs[0] == outs[1]


def test_seed_changes_results(tmp_path):
    for name, seed in (("a", "0"), ("b", "1")):
        cli.main(["run", "mass_conservation", *SMALL_MASS, "--seed", seed,
                  "--out", str(tmp_path / name)])
    a = (tmp_path / "a" / "mass_conservation.csv").read_text()
    b = (tmp_path / "b" / "mass_conservation.csv").read_text()
    assert a != b


def test_divergence_exit_code(tmp_path):
    code = _run(tmp_path, "table71", "--set", "tol=1e-12", "--set", "max_iter=2",
                "--set", "h_list=1/4")
    assert code == 2
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["summary"]["diverged"] is True


def test_config_hash_depends_on_experiment_and_values():
    a = ExperimentConfig()
    assert cli.config_hash(a, "table71") != cli.config_hash(a, "test2_mc")
    assert cli.config_hash(a, "table71") != cli.config_hash(a.updated({"nu": "2"}), "table71")


def test_first_passage_counts_per_sample():
    from ensemble_ddm.experiments import first_passage

    inc = np.array([[1e-1, 1e-1, 1e-1], [1e-3, 1e-1, 1e-2], [1e-6, 1e-4, 1e-2]])
    np.testing.assert_array_equal(first_passage(inc, 1e-2), [2, 3, -1])
