import sys
from pathlib import Path

import pytest
from pydantic import ValidationError

# 允许直接运行 pytest 时找到 app 包
ROOT = Path(__file__).resolve().parents[2]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.schemas.config import (  # noqa: E402
    ExperimentConfig,
    ExperimentKind,
    NoiseMechanism,
    PrivacyBudget,
    SimConfig,
    StepSchedule,
)
from app.schemas.results import RunMetadata  # noqa: E402


def test_sim_config_fills_eta_tilde():
    config = SimConfig(n=2, R=5, tau=4, d=3, eta=0.25, eta_g=2.0)
    assert config.eta_tilde == pytest.approx(2.0)
    assert config.mechanism is NoiseMechanism.CORRELATED_MF
    assert config.step_schedule is StepSchedule.CONSTANT
    assert config.budget == PrivacyBudget(epsilon=5.0, delta=1e-3)


def test_sim_config_rejects_inconsistent_eta_tilde():
    with pytest.raises(ValidationError):
        SimConfig(n=2, R=5, tau=4, d=3, eta=0.25, eta_tilde=3.0)


@pytest.mark.parametrize("field", ["n", "R", "tau", "d"])
def test_sim_config_rejects_zero_dimensions(field):
    payload = dict(n=1, R=1, tau=1, d=1, eta=0.1)
    payload[field] = 0
    with pytest.raises(ValidationError):
        SimConfig(**payload)


def test_with_updates_recomputes_eta_tilde():
    config = SimConfig(n=2, R=5, tau=4, d=3, eta=0.25)
    changed = config.with_updates(tau=2, seed=9)
    assert changed.eta_tilde == pytest.approx(0.5)
    assert changed.seed == 9
    assert config.seed == 0
    with pytest.raises(ValidationError):
        config.with_updates(eta=-1.0)


@pytest.mark.parametrize("epsilon, delta", [(0.0, 1e-3), (-1.0, 1e-3), (1.0, 0.0), (1.0, 1.0)])
def test_budget_bounds(epsilon, delta):
    with pytest.raises(ValidationError):
        PrivacyBudget(epsilon=epsilon, delta=delta)


def test_experiment_defaults():
    config = ExperimentConfig()
    assert config.experiment is ExperimentKind.CUSTOM
    assert config.sensitivity_reading == "averaged"
    assert config.sim.R == 800 and config.sim.tau == 10
    assert [(item.tau, item.R) for item in config.tau_rounds] == [(1, 800), (2, 400), (4, 200)]
    assert config.baseline_step_grid == [1.0, 0.5, 0.25, 0.125]


def test_sensitivity_reading_variants():
    assert ExperimentConfig(sensitivity_reading="literal").sensitivity_reading == "literal"
    assert ExperimentConfig(sensitivity_reading=0.5).sensitivity_reading == 0.5
    with pytest.raises(ValidationError):
        ExperimentConfig(sensitivity_reading="bogus")
    with pytest.raises(ValidationError):
        ExperimentConfig(sensitivity_reading=-1.0)


def test_impact_tau_requires_equal_totals():
    with pytest.raises(ValidationError):
        ExperimentConfig(experiment="impact_tau", tau_rounds=[{"tau": 1, "R": 10}, {"tau": 2, "R": 10}])
    ok = ExperimentConfig(experiment="impact_tau", tau_rounds=[{"tau": 1, "R": 10}, {"tau": 5, "R": 2}])
    assert len(ok.tau_rounds) == 2


def test_budget_comparison_requires_budgets():
    with pytest.raises(ValidationError):
        ExperimentConfig(experiment="budget_comparison", budgets=[])


def test_run_metadata_round_trip():
    metadata = RunMetadata(schema_version=1, experiment="custom", master_seed=3, files=["trace.csv"])
    again = RunMetadata.model_validate_json(metadata.model_dump_json())
    assert again == metadata
    assert again.curves == []
