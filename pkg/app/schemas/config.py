from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Any, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator

from app.services.workload_factorization import FactorizationMethod


class NoiseMechanism(str, Enum):
    CORRELATED_MF = "correlated_mf"
    INDEPENDENT_ZCDP = "independent_zcdp"
    NONE = "none"


class StepSchedule(str, Enum):
    CONSTANT = "constant"
    DIMINISHING = "diminishing"


class ExperimentKind(str, Enum):
    BNORM_STUDY = "bnorm_study"
    IMPACT_TAU = "impact_tau"
    BUDGET_COMPARISON = "budget_comparison"
    CUSTOM = "custom"


SensitivityReading = Union[Literal["literal", "averaged"], PositiveFloat]


class PrivacyBudget(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(..., gt=0, description="隐私预算 ε")
    delta: float = Field(..., gt=0, lt=1, description="隐私预算 δ ∈ (0, 1)")


class DataParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(0.1, ge=0, description="学习器权重先验的异质程度")
    beta: float = Field(0.1, ge=0, description="学习器特征均值先验的异质程度")
    normalize_features: bool = Field(True, description="把特征缩放到 ‖a‖ ≤ 1，使裁剪不生效")
    stationary: bool = Field(False, description="每一轮重复同一份数据模板")


class SimConfig(BaseModel):
    """一次仿真的全部超参数；eta_tilde 必须等于 eta·eta_g·tau。"""

    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=1, description="学习器数量")
    R: int = Field(..., ge=1, description="通信轮数")
    tau: int = Field(..., ge=1, description="每轮本地步数")
    d: int = Field(..., ge=1, description="特征维度")
    eta: float = Field(..., gt=0, description="本地步长 η")
    eta_g: float = Field(1.0, gt=0, description="全局步长 η_g")
    eta_tilde: Optional[float] = Field(None, description="η̃ = η·η_g·τ，留空则自动计算")
    clip_bound: float = Field(1.0, gt=0, description="梯度裁剪上界 B_g")
    smoothness_estimate: Optional[float] = Field(None, gt=0, description="L̂，留空则由数据估计")
    seed: int = Field(0, ge=0, lt=2**64)
    budget: PrivacyBudget = Field(default_factory=lambda: PrivacyBudget(epsilon=5.0, delta=1e-3))
    mechanism: NoiseMechanism = NoiseMechanism.CORRELATED_MF
    trials: int = Field(20, ge=1)
    sensitivity_scale: float = Field(1.0, gt=0, description="逐行敏感度的缩放（literal 读法为 1）")
    step_schedule: StepSchedule = StepSchedule.CONSTANT
    baseline_eta: Optional[float] = Field(None, gt=0, description="独立噪声基线的步长，留空则取 η̃/τ")
    factorization_method: FactorizationMethod = FactorizationMethod.SQRT_NORMALIZED

    @model_validator(mode="before")
    @classmethod
    def _fill_eta_tilde(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("eta_tilde") is None:
            try:
                data = {**data, "eta_tilde": float(data["eta"]) * float(data.get("eta_g", 1.0)) * int(data["tau"])}
            except (KeyError, TypeError, ValueError):
                return data
        return data

    @model_validator(mode="after")
    def _check_eta_tilde(self) -> "SimConfig":
        expected = self.eta * self.eta_g * self.tau
        if self.eta_tilde != expected:
            raise ValueError(f"eta_tilde={self.eta_tilde} 必须等于 eta·eta_g·tau={expected}")
        return self

    def with_updates(self, **updates: Any) -> "SimConfig":
        """重新走一遍校验的 model_copy；未显式给出 eta_tilde 时重新计算。"""
        payload = self.model_dump()
        payload.update(updates)
        if "eta_tilde" not in updates:
            payload["eta_tilde"] = None
        return SimConfig.model_validate(payload)


class SimSettings(BaseModel):
    """实验模板：eta 留空时由 step_scale / L̂ 推出，并在所有 τ 设置间保持不变。"""

    model_config = ConfigDict(frozen=True)

    n: int = Field(10, ge=1)
    R: int = Field(800, ge=1)
    tau: int = Field(10, ge=1)
    d: int = Field(5, ge=1)
    eta: Optional[float] = Field(None, gt=0)
    eta_g: float = Field(1.0, gt=0)
    step_scale: float = Field(0.125, gt=0, description="η̃_max = step_scale / L̂")
    clip_bound: float = Field(1.0, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    budget: PrivacyBudget = Field(default_factory=lambda: PrivacyBudget(epsilon=5.0, delta=1e-3))
    mechanism: NoiseMechanism = NoiseMechanism.CORRELATED_MF
    step_schedule: StepSchedule = StepSchedule.CONSTANT
    factorization_method: FactorizationMethod = FactorizationMethod.SQRT_NORMALIZED


class TauRounds(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: int = Field(..., ge=1)
    R: int = Field(..., ge=1)


def _default_tau_rounds() -> List[TauRounds]:
    return [TauRounds(tau=1, R=800), TauRounds(tau=2, R=400), TauRounds(tau=4, R=200)]


def _default_budgets() -> List[PrivacyBudget]:
    return [PrivacyBudget(epsilon=5.0, delta=1e-3), PrivacyBudget(epsilon=1.0, delta=1e-3)]


class ExperimentConfig(BaseModel):
    """实验配置文件（JSON）的完整结构；`python main.py schema` 输出其 JSON Schema。"""

    experiment: ExperimentKind = ExperimentKind.CUSTOM
    sim: SimSettings = Field(default_factory=SimSettings)
    data: DataParams = Field(default_factory=DataParams)
    tau_rounds: List[TauRounds] = Field(default_factory=_default_tau_rounds)
    budgets: List[PrivacyBudget] = Field(default_factory=_default_budgets)
    R_list: List[int] = Field(default_factory=lambda: [16, 32, 64, 128, 256])
    methods: List[FactorizationMethod] = Field(default_factory=lambda: [FactorizationMethod.SQRT_NORMALIZED])
    baseline_step_grid: List[PositiveFloat] = Field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125])
    sensitivity_reading: SensitivityReading = "averaged"
    trials: int = Field(20, ge=1)
    jobs: int = Field(1, ge=1)
    output_dir: Path = Path("results")
    factorization_cache: Optional[Path] = None
    data_cache: Optional[Path] = None
    export_models: bool = False
    show_progress: bool = False

    @model_validator(mode="after")
    def _check_experiment(self) -> "ExperimentConfig":
        if any(R < 1 for R in self.R_list):
            raise ValueError("R_list 中的 R 必须 ≥ 1")
        if self.experiment is ExperimentKind.IMPACT_TAU:
            if not self.tau_rounds:
                raise ValueError("impact_tau 至少需要一组 (tau, R)")
            totals = {item.tau * item.R for item in self.tau_rounds}
            if len(totals) != 1:
                raise ValueError(f"impact_tau 要求各组 tau·R 相同（总数据量一致），当前为 {sorted(totals)}")
        if self.experiment is ExperimentKind.BUDGET_COMPARISON and not self.budgets:
            raise ValueError("budget_comparison 至少需要一个隐私预算")
        return self
