import json
import logging
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[2]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.schemas.config import ExperimentConfig, ExperimentKind, SimConfig, SimSettings  # noqa: E402
from app.services.exceptions import ConfigurationError  # noqa: E402
from app.services.experiment_runner import (  # noqa: E402
    TrialResult,
    aggregate_trials,
    resolve_local_step,
    run_bnorm_experiment,
    run_budget_comparison,
    run_custom,
    run_experiment,
    run_impact_tau,
    trial_seeds,
)
from app.services.ofl_simulator import default_local_step  # noqa: E402
from app.services.privacy_accounting import calibrate_none  # noqa: E402
from app.services.trial_progress import TrialPhase, TrialProgress  # noqa: E402


def _experiment(tmp_path: Path, kind: ExperimentKind, **overrides) -> ExperimentConfig:
    payload = {
        "experiment": kind,
        "sim": {"n": 3, "R": 12, "tau": 2, "d": 3, "seed": 7},
        "trials": 2,
        "output_dir": tmp_path,
    }
    payload.update(overrides)
    return ExperimentConfig.model_validate(payload)


def _trial(k: int, values) -> TrialResult:
    return TrialResult(
        trial=k,
        seed=100 + k,
        loss_errors=np.asarray(values, dtype=float),
        max_virtual_residual=0.0,
        max_drift_ratio=0.5,
    )


def _read_metadata(directory: Path) -> dict:
    return json.loads((directory / "metadata.json").read_text(encoding="utf-8"))


def test_trial_seeds_are_per_label():
    seeds = trial_seeds(42, "correlated", 5)
    assert seeds == trial_seeds(42, "correlated", 5)
    assert len(set(seeds)) == 5
    assert seeds[:3] == trial_seeds(42, "correlated", 3)
    assert set(seeds).isdisjoint(trial_seeds(42, "independent", 5))


def test_aggregate_uses_sample_std_and_trial_order():
    config = SimConfig(n=1, R=2, tau=1, d=1, eta=0.1, trials=3)
    trials = [_trial(2, [3.0, 0.0]), _trial(0, [1.0, 0.0]), _trial(1, [2.0, 0.0])]
    aggregate = aggregate_trials("demo", trials, config, calibrate_none())
    assert [item.trial for item in aggregate.trials] == [0, 1, 2]
    assert aggregate.mean.tolist() == [2.0, 0.0]
    assert aggregate.std.tolist() == [1.0, 0.0]
    assert aggregate.final_mean == 0.0
    assert aggregate.file_name == "curve_demo.csv"

    single = aggregate_trials("one", [_trial(0, [0.5, 0.25])], config, calibrate_none())
    assert single.std.tolist() == [0.0, 0.0]
    with pytest.raises(ConfigurationError):
        aggregate_trials("empty", [], config, calibrate_none())


def test_resolve_local_step():
    assert resolve_local_step(SimSettings(eta=0.3), 0.25, 4) == 0.3
    settings = SimSettings()
    assert resolve_local_step(settings, 0.25, 4) == pytest.approx(default_local_step(0.25, 4, eta_g=1.0, step_scale=0.125))


def test_bnorm_experiment_writes_rows(tmp_path: Path):
    config = _experiment(
        tmp_path,
        ExperimentKind.BNORM_STUDY,
        R_list=[4, 8],
        methods=["sqrt_normalized", "trivial_identity_c"],
    )
    outcome = run_bnorm_experiment(config)
    assert len(outcome.bnorm_rows) == 4
    lines = (tmp_path / "bnorm_study.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# schema_version=1"
    assert lines[1] == "R,method,frob_sq_b,ratio"
    assert lines[-1].startswith("8,trivial_identity_c,36,")
    metadata = _read_metadata(tmp_path)
    assert metadata["experiment"] == "bnorm_study"
    assert metadata["files"] == ["bnorm_study.csv"]


def test_impact_tau_regroups_one_stream(tmp_path: Path, caplog):
    config = _experiment(
        tmp_path,
        ExperimentKind.IMPACT_TAU,
        tau_rounds=[{"tau": 1, "R": 8}, {"tau": 2, "R": 4}, {"tau": 4, "R": 2}],
    )
    progress = TrialProgress()
    with caplog.at_level(logging.INFO, logger="app.services.experiment_runner"):
        outcome = run_impact_tau(config, progress=progress)

    assert [curve.label for curve in outcome.curves] == ["tau1_R8", "tau2_R4", "tau4_R2"]
    assert [curve.R for curve in outcome.curves] == [8, 4, 2]
    assert len({curve.config.eta for curve in outcome.curves}) == 1
    for curve in outcome.curves:
        assert curve.config.sensitivity_scale == pytest.approx(1.0 / (3 * curve.config.tau))
        assert (tmp_path / curve.file_name).exists()

    snapshot = progress.snapshot()
    assert snapshot.phase is TrialPhase.DONE
    assert snapshot.finished_trials == 6
    assert snapshot.total_trials == 6
    assert [(item.label, item.finished) for item in snapshot.curves] == [("tau1_R8", 2), ("tau2_R4", 2), ("tau4_R2", 2)]
    assert "[tau1_R8] 进度 2/6 次试验" in caplog.text
    assert "[tau4_R2] 进度 6/6 次试验" in caplog.text

    metadata = _read_metadata(tmp_path)
    assert metadata["oracle"]["converged"] is True
    assert [curve["tau"] for curve in metadata["curves"]] == [1, 2, 4]
    resolved = json.loads((tmp_path / "resolved_config.json").read_text(encoding="utf-8"))
    assert resolved["experiment"] == "impact_tau"


def test_budget_comparison_is_reproducible(tmp_path: Path):
    first_dir, second_dir = tmp_path / "first", tmp_path / "second"
    sim = {"n": 3, "R": 50, "tau": 2, "d": 3, "seed": 1}
    first = run_budget_comparison(_experiment(first_dir, ExperimentKind.BUDGET_COMPARISON, sim=sim))
    run_budget_comparison(_experiment(second_dir, ExperimentKind.BUDGET_COMPARISON, sim=sim, jobs=2))

    labels = [curve.label for curve in first.curves]
    assert labels == [
        "correlated_eps5_delta0.001",
        "independent_eps5_delta0.001",
        "correlated_eps1_delta0.001",
        "independent_eps1_delta0.001",
    ]
    for curve in first.curves:
        name = curve.file_name
        assert (first_dir / name).read_bytes() == (second_dir / name).read_bytes()

    metadata = _read_metadata(first_dir)
    for entry in metadata["curves"]:
        if entry["mechanism"] == "independent_zcdp":
            grid = entry["baseline_grid"]
            assert len(grid) == 4
            assert sum(item["selected"] for item in grid) == 1
            chosen = next(item for item in grid if item["selected"])
            assert chosen["final_mean"] == min(item["final_mean"] for item in grid)
            assert entry["baseline_eta"] == pytest.approx(chosen["baseline_eta"])
        else:
            assert entry["frob_sq_b"] is not None
            assert entry["calibration"]["noise_generator"] == "numpy-pcg64-standard_normal-v1"


def test_custom_run_exports_trace_and_regret(tmp_path: Path):
    config = _experiment(tmp_path, ExperimentKind.CUSTOM, export_models=True, sensitivity_reading="literal")
    outcome = run_experiment(config)
    assert [curve.label for curve in outcome.curves] == ["correlated_mf"]
    for name in ("curve_correlated_mf.csv", "trace.csv", "regret.csv", "trace_models.csv"):
        assert (tmp_path / name).exists()
    metadata = _read_metadata(tmp_path)
    assert set(metadata["files"]) == {"curve_correlated_mf.csv", "trace.csv", "regret.csv", "trace_models.csv"}
    assert isinstance(metadata["smoothness_violations"], int)
    assert metadata["smoothness_violations"] >= 0
    (curve,) = metadata["curves"]
    assert curve["sensitivity_reading"] == "literal"
    assert curve["max_virtual_residual"] <= 1e-9
    assert curve["max_drift_ratio"] <= 1.0


def test_custom_run_with_independent_mechanism(tmp_path: Path):
    sim = {"n": 2, "R": 6, "tau": 3, "d": 2, "mechanism": "independent_zcdp"}
    config = _experiment(tmp_path, ExperimentKind.CUSTOM, sim=sim)
    outcome = run_custom(config)
    (curve,) = outcome.curves
    assert curve.config.baseline_eta is None
    assert curve.calibration.rho is not None
    assert curve.mean.shape == (6,)
    metadata = _read_metadata(tmp_path)
    assert metadata["smoothness_violations"] == outcome.metadata.smoothness_violations
    assert metadata["smoothness_estimate"] > 0
