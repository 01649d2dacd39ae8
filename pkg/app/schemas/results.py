from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field

from app.schemas.config import DataParams, PrivacyBudget


class CalibrationModel(BaseModel):
    """实际使用的噪声标定，写入 metadata.json。"""

    mechanism: str
    variance: float
    std: float
    clip_bound: float
    gamma: float
    sensitivity_scale: float = 1.0
    rho: Optional[float] = None
    noise_generator: str


class OracleModel(BaseModel):
    min_value: float
    grad_norm_at_min: float
    iterations: int
    converged: bool
    ridge: float = 0.0
    method: str
    separable: bool = False


class BaselineGridScore(BaseModel):
    factor: float = Field(description="相对 η̃/τ 的步长倍数")
    baseline_eta: float
    final_mean: float
    final_std: float
    selected: bool = False


class CurveMetadata(BaseModel):
    label: str
    file: str
    mechanism: str
    budget: PrivacyBudget
    n: int
    R: int
    tau: int
    d: int
    eta: float
    eta_g: float
    eta_tilde: float
    baseline_eta: Optional[float] = None
    step_schedule: str
    factorization_method: Optional[str] = None
    frob_sq_b: Optional[float] = None
    sensitivity_reading: str
    calibration: CalibrationModel
    trial_seeds: List[int] = Field(default_factory=list)
    final_mean: float
    final_std: float
    max_virtual_residual: float = 0.0
    max_drift_ratio: float = 0.0
    baseline_grid: List[BaselineGridScore] = Field(default_factory=list)


class RunMetadata(BaseModel):
    schema_version: int
    experiment: str
    master_seed: int
    data: Optional[DataParams] = None
    smoothness_estimate: Optional[float] = None
    smoothness_violations: Optional[int] = None
    oracle: Optional[OracleModel] = None
    curves: List[CurveMetadata] = Field(default_factory=list)
    files: List[str] = Field(default_factory=list)


class PropertyCheckModel(BaseModel):
    name: str
    module: str
    invariant: str
    ok: bool
    detail: str = ""


class PropertyReportModel(BaseModel):
    ok: bool
    checks: List[PropertyCheckModel] = Field(default_factory=list)
