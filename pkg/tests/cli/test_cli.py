import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[2]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, build_parser, load_experiment_config, main  # noqa: E402
from app.schemas.config import ExperimentKind  # noqa: E402


def _write_config(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_schema_command(capsys):
    assert main(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert "sim" in schema["properties"]
    assert "sensitivity_reading" in schema["properties"]


def test_factorize_command(tmp_path: Path):
    assert main(["factorize", "--R", "4", "--out", str(tmp_path)]) == EXIT_OK
    bundle = tmp_path / "sqrt_normalized_R4"
    for name in ("B.csv", "C.csv", "meta.csv"):
        assert (bundle / name).exists()


def test_factorize_rejects_bad_dimension(tmp_path: Path):
    assert main(["factorize", "--R", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_verify_command(capsys):
    assert main(["verify", "--pairs", "2"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] is True


def test_verify_with_fault_fails():
    assert main(["verify", "--pairs", "2", "--fault", "perturb_b"]) == EXIT_INVARIANT


def test_config_errors_exit_with_two(tmp_path: Path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    assert main(["simulate", "--config", str(broken)]) == EXIT_CONFIG

    invalid = _write_config(tmp_path / "invalid.json", {"sim": {"n": 0}})
    assert main(["simulate", "--config", str(invalid)]) == EXIT_CONFIG

    listing = _write_config(tmp_path / "list.json", [1, 2])
    assert main(["simulate", "--config", str(listing)]) == EXIT_CONFIG

    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    mismatched = _write_config(tmp_path / "tau.json", {"tau_rounds": [{"tau": 1, "R": 4}, {"tau": 2, "R": 4}]})
    assert main(["impact-tau", "--config", str(mismatched)]) == EXIT_CONFIG


def test_flags_override_config_file(tmp_path: Path):
    path = _write_config(tmp_path / "run.json", {"sim": {"n": 4, "seed": 1}, "trials": 7, "jobs": 2})
    args = build_parser().parse_args(
        ["simulate", "--config", str(path), "--seed", "5", "--trials", "3", "--out", str(tmp_path / "out")]
    )
    config = load_experiment_config(args)
    assert config.experiment is ExperimentKind.CUSTOM
    assert config.sim.seed == 5
    assert config.sim.n == 4
    assert config.trials == 3
    assert config.jobs == 2
    assert config.output_dir == tmp_path / "out"
    assert config.sensitivity_reading == "literal"

    scaled = load_experiment_config(build_parser().parse_args(["impact-tau", "--sensitivity-scale", "0.5"]))
    assert scaled.sensitivity_reading == 0.5
    assert scaled.experiment is ExperimentKind.IMPACT_TAU


@pytest.mark.parametrize(
    "flag, expected",
    [("averaged", "averaged"), ("literal", "literal"), ("0.25", 0.25)],
)
def test_sensitivity_scale_accepts_named_readings(flag, expected):
    config = load_experiment_config(build_parser().parse_args(["budget-compare", "--sensitivity-scale", flag]))
    assert config.sensitivity_reading == expected


@pytest.mark.parametrize("flag", ["mean", "0", "-1.5"])
def test_sensitivity_scale_rejects_other_values(flag, capsys):
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["simulate", "--sensitivity-scale", flag])
    assert excinfo.value.code == 2
    assert "--sensitivity-scale" in capsys.readouterr().err


def test_environment_fills_missing_keys(tmp_path: Path, monkeypatch):
    monkeypatch.setenv("OFLSIM_JOBS", "4")
    monkeypatch.setenv("OFLSIM_DATA_CACHE", str(tmp_path / "data"))
    config = load_experiment_config(build_parser().parse_args(["budget-compare"]))
    assert config.jobs == 4
    assert config.data_cache == tmp_path / "data"
    assert config.sensitivity_reading == "averaged"

    path = _write_config(tmp_path / "run.json", {"jobs": 1})
    config = load_experiment_config(build_parser().parse_args(["budget-compare", "--config", str(path)]))
    assert config.jobs == 1


def test_bnorm_study_command(tmp_path: Path, capsys):
    out = tmp_path / "bnorm"
    assert main(["bnorm-study", "--out", str(out), "--R-list", "2", "4", "--methods", "trivial_identity_b"]) == EXIT_OK
    assert (out / "bnorm_study.csv").exists()
    assert "R=4" in capsys.readouterr().out


def test_simulate_command_end_to_end(tmp_path: Path):
    path = _write_config(tmp_path / "run.json", {"sim": {"n": 2, "R": 6, "tau": 2, "d": 3}})
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(path), "--trials", "2", "--out", str(out)]) == EXIT_OK
    metadata = json.loads((out / "metadata.json").read_text(encoding="utf-8"))
    assert metadata["experiment"] == "custom"
    assert (out / "regret.csv").exists()
