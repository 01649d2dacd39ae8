"""Utility metrics: dynamic/static regret and loss error against numerical offline oracles."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit, log_expit

from app.services.data_stream import StreamDataset, batch_losses
from app.services.exceptions import InvalidDimensionError, MissingOracleError
from app.services.ofl_simulator import SimulationTrace
from app.storage.constants import REGRET_FILE
from app.storage.csv_store import write_versioned_csv

logger = logging.getLogger(__name__)

ORACLE_TOL = 1e-8
ORACLE_MAX_ITERS = 100_000
RIDGE_FALLBACK = 1e-6
TOL_SLACK = 1e-6
_ARMIJO = 1e-4
_MIN_STEP = 1e-20
_LOSS_CHUNK = 200_000


class OracleMethod(str, Enum):
    NEWTON = "newton"
    GRADIENT = "gradient"


class RegretScaling(str, Enum):
    """CLIENT_SUM：每轮项为 nτ(f^r − f^r*)；LEARNER_MEAN：τ(f^r − f^r*)，与静态遗憾同一尺度。"""

    CLIENT_SUM = "client_sum"
    LEARNER_MEAN = "learner_mean"


@dataclass(frozen=True)
class OracleSolution:
    minimizer: np.ndarray
    min_value: float
    grad_norm_at_min: float
    iterations: int
    converged: bool
    ridge: float = 0.0
    method: OracleMethod = OracleMethod.NEWTON
    separable: bool = False


@dataclass(frozen=True)
class RegretReport:
    dynamic_regret: float
    static_regret: float
    per_round_dynamic: np.ndarray
    loss_error_series: np.ndarray
    oracle_global: OracleSolution
    oracle_per_round: Sequence[OracleSolution] = field(default_factory=tuple)
    local_static_regret: Optional[float] = None
    scaling: RegretScaling = RegretScaling.CLIENT_SUM
    clamped_rounds: tuple[int, ...] = ()


# ----------------------------------------------------------------------
# 离线 oracle
# ----------------------------------------------------------------------


def _objective(x: np.ndarray, features: np.ndarray, labels: np.ndarray, ridge: float) -> tuple[float, np.ndarray]:
    margins = labels * (features @ x)
    value = float(np.mean(-log_expit(margins))) + 0.5 * ridge * float(x @ x)
    weights = labels * expit(-margins)
    gradient = -(features.T @ weights) / features.shape[0] + ridge * x
    return value, gradient


def _hessian(x: np.ndarray, features: np.ndarray, labels: np.ndarray, ridge: float) -> np.ndarray:
    margins = labels * (features @ x)
    curvature = expit(margins) * expit(-margins)
    hessian = (features.T * curvature) @ features / features.shape[0]
    return hessian + ridge * np.eye(features.shape[1])


def is_linearly_separable(features: np.ndarray, labels: np.ndarray) -> bool:
    """是否存在 w 使所有 b⟨w, a⟩ ≥ 1；可分时无正则的最小值点不存在。"""
    d = features.shape[1]
    result = linprog(
        c=np.zeros(d),
        A_ub=-(labels[:, None] * features),
        b_ub=-np.ones(features.shape[0]),
        bounds=[(None, None)] * d,
        method="highs",
    )
    return result.status == 0


def _minimize(
    features: np.ndarray,
    labels: np.ndarray,
    *,
    ridge: float,
    tol: float,
    max_iters: int,
    method: OracleMethod,
) -> tuple[np.ndarray, int, bool]:
    x = np.zeros(features.shape[1])
    value, gradient = _objective(x, features, labels, ridge)
    smoothness = float(np.max(np.sum(features * features, axis=1))) / 4.0 + ridge
    trial_step = 1.0 / smoothness if smoothness > 0 else 1.0
    previous: Optional[tuple[np.ndarray, np.ndarray]] = None

    for iteration in range(max_iters):
        if np.linalg.norm(gradient) <= tol:
            return x, iteration, True
        if method is OracleMethod.NEWTON:
            direction = np.linalg.lstsq(_hessian(x, features, labels, ridge), -gradient, rcond=None)[0]
            if not float(gradient @ direction) < 0:
                direction = -gradient
            step = 1.0
        else:
            direction = -gradient
            if previous is not None:
                s, y = x - previous[0], gradient - previous[1]
                sy = float(s @ y)
                if sy > 0:
                    trial_step = float(s @ s) / sy
            step = trial_step

        slope = float(gradient @ direction)
        while step >= _MIN_STEP:
            candidate = x + step * direction
            candidate_value, candidate_gradient = _objective(candidate, features, labels, ridge)
            if candidate_value <= value + _ARMIJO * step * slope:
                break
            step *= 0.5
        else:
            # 数值平台期：函数值已无法分辨，只在梯度继续下降时接受整步
            candidate = x + direction if method is OracleMethod.NEWTON else x + trial_step * direction
            candidate_value, candidate_gradient = _objective(candidate, features, labels, ridge)
            if np.linalg.norm(candidate_gradient) >= np.linalg.norm(gradient):
                return x, iteration, False

        previous = (x, gradient)
        x, value, gradient = candidate, candidate_value, candidate_gradient

    return x, max_iters, bool(np.linalg.norm(gradient) <= tol)


def solve_offline(
    features: np.ndarray,
    labels: np.ndarray,
    *,
    tol: float = ORACLE_TOL,
    max_iters: int = ORACLE_MAX_ITERS,
    ridge: float = 0.0,
    method: OracleMethod | str = OracleMethod.NEWTON,
    check_separable: bool = True,
) -> OracleSolution:
    """从 x = 0 出发最小化平均 logistic 损失（+ λ/2‖x‖²）。

    无正则且数据线性可分、或无正则求解未收敛时，自动改用 λ = 1e−6 并在结果中标记。
    """
    features = np.asarray(features, dtype=float).reshape(-1, np.shape(features)[-1])
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if features.shape[0] == 0 or features.shape[0] != labels.shape[0]:
        raise InvalidDimensionError(f"oracle 需要非空且一致的数据，当前 features={features.shape}, labels={labels.shape}")
    if ridge < 0:
        raise InvalidDimensionError(f"ridge 必须 ≥ 0，当前为 {ridge}")
    method = OracleMethod(method)

    separable = False
    if ridge == 0.0 and check_separable and is_linearly_separable(features, labels):
        separable = True
        ridge = RIDGE_FALLBACK
        logger.info("oracle 数据线性可分（%d 条），直接使用 ridge=%.0e", features.shape[0], ridge)

    x, iterations, converged = _minimize(features, labels, ridge=ridge, tol=tol, max_iters=max_iters, method=method)
    if not converged and ridge == 0.0:
        logger.warning("oracle 未在 %d 次迭代内收敛，改用 ridge=%.0e 重试", iterations, RIDGE_FALLBACK)
        ridge = RIDGE_FALLBACK
        x, extra, converged = _minimize(features, labels, ridge=ridge, tol=tol, max_iters=max_iters, method=method)
        iterations += extra

    _, gradient = _objective(x, features, labels, ridge)
    return OracleSolution(
        minimizer=x,
        min_value=float(np.mean(batch_losses(x, features, labels))),
        grad_norm_at_min=float(np.linalg.norm(gradient)),
        iterations=iterations,
        converged=converged,
        ridge=ridge,
        method=method,
        separable=separable,
    )


def solve_round_oracles(
    dataset: StreamDataset,
    *,
    tol: float = ORACLE_TOL,
    method: OracleMethod | str = OracleMethod.NEWTON,
    jobs: int = 1,
) -> list[OracleSolution]:
    """每轮 nτ 条数据各自求 f̂^r*；并行求解，结果按轮次顺序返回。"""

    def solve(r: int) -> OracleSolution:
        features, labels = dataset.round_slice(r)
        return solve_offline(features, labels, tol=tol, method=method)

    if jobs <= 1:
        return [solve(r) for r in range(dataset.R)]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(solve, range(dataset.R)))


def solve_global_oracle(
    dataset: StreamDataset,
    *,
    tol: float = ORACLE_TOL,
    method: OracleMethod | str = OracleMethod.NEWTON,
) -> OracleSolution:
    features, labels = dataset.flat()
    return solve_offline(features, labels, tol=tol, method=method)


# ----------------------------------------------------------------------
# 遗憾与损失误差
# ----------------------------------------------------------------------


def _released_round_means(trace: SimulationTrace, dataset: StreamDataset) -> np.ndarray:
    models = trace.released_models
    if models.shape[0] != dataset.R:
        raise InvalidDimensionError(f"轨迹轮数 {models.shape[0]} 与数据集 R={dataset.R} 不一致")
    # features (n, R, τ, d) 与 models (R, d) 按轮次广播
    return np.mean(batch_losses(models[None, :, None, :], dataset.features, dataset.labels), axis=(0, 2))


def dynamic_regret(
    trace: SimulationTrace,
    dataset: StreamDataset,
    oracles_per_round: Sequence[Optional[OracleSolution]],
    *,
    scaling: RegretScaling | str = RegretScaling.CLIENT_SUM,
) -> tuple[np.ndarray, float, tuple[int, ...]]:
    """返回 (每轮项, 总和, 被截断的轮次)；每轮项下限为 −scale·1e−6。"""
    scaling = RegretScaling(scaling)
    if len(oracles_per_round) != dataset.R or any(oracle is None for oracle in oracles_per_round):
        raise MissingOracleError(f"需要 {dataset.R} 个逐轮 oracle，实际 {len(oracles_per_round)} 个（或含缺失）")
    scale = dataset.n * dataset.tau if scaling is RegretScaling.CLIENT_SUM else dataset.tau
    minima = np.array([oracle.min_value for oracle in oracles_per_round])
    per_round = scale * (_released_round_means(trace, dataset) - minima)
    floor = -scale * TOL_SLACK
    clamped = tuple(int(r) for r in np.flatnonzero(per_round < floor))
    if clamped:
        logger.warning("动态遗憾有 %d 轮低于 oracle 容差下限，已截断（oracle 精度不足）", len(clamped))
        per_round = np.maximum(per_round, floor)
    return per_round, float(np.sum(per_round)), clamped


def static_regret(trace: SimulationTrace, dataset: StreamDataset, oracle_global: Optional[OracleSolution]) -> float:
    """Σ_r Σ_t (1/n) Σ_i f_i^{r,t}(x^r) − Σ_r τ f^r(x̂*)。"""
    if oracle_global is None:
        raise MissingOracleError("静态遗憾需要全局 oracle")
    comparator = np.mean(batch_losses(oracle_global.minimizer, dataset.features, dataset.labels), axis=(0, 2))
    return float(dataset.tau * np.sum(_released_round_means(trace, dataset) - comparator))


def local_static_regret(trace: SimulationTrace, dataset: StreamDataset, oracle_global: Optional[OracleSolution]) -> float:
    """以本地模型 z_i^{r,t} 计损失的静态遗憾。"""
    if oracle_global is None:
        raise MissingOracleError("局部静态遗憾需要全局 oracle")
    comparator = np.mean(batch_losses(oracle_global.minimizer, dataset.features, dataset.labels), axis=(0, 2))
    return float(np.sum(trace.local_loss_sums / dataset.n - dataset.tau * comparator))


def _full_mean_losses(models: np.ndarray, dataset: StreamDataset) -> np.ndarray:
    features, labels = dataset.flat()
    models = np.atleast_2d(models)
    chunk = max(1, _LOSS_CHUNK // features.shape[0])
    means = np.empty(models.shape[0])
    for start in range(0, models.shape[0], chunk):
        block = models[start : start + chunk]
        means[start : start + chunk] = np.mean(-log_expit(labels * (block @ features.T)), axis=1)
    return means


def loss_error(x: np.ndarray, dataset: StreamDataset, oracle_global: Optional[OracleSolution]) -> float:
    if oracle_global is None:
        raise MissingOracleError("损失误差需要全局 oracle")
    baseline = _full_mean_losses(oracle_global.minimizer, dataset)[0]
    return float(_full_mean_losses(np.asarray(x), dataset)[0] - baseline)


def loss_error_series(trace: SimulationTrace, dataset: StreamDataset, oracle_global: Optional[OracleSolution]) -> np.ndarray:
    """每个已发布模型 x^r 在整个数据集上的损失误差（长度 R）。"""
    if oracle_global is None:
        raise MissingOracleError("损失误差需要全局 oracle")
    baseline = _full_mean_losses(oracle_global.minimizer, dataset)[0]
    return _full_mean_losses(trace.released_models, dataset) - baseline


def build_regret_report(
    trace: SimulationTrace,
    dataset: StreamDataset,
    *,
    oracle_global: Optional[OracleSolution] = None,
    oracles_per_round: Optional[Sequence[OracleSolution]] = None,
    scaling: RegretScaling | str = RegretScaling.CLIENT_SUM,
    method: OracleMethod | str = OracleMethod.NEWTON,
) -> RegretReport:
    if oracle_global is None:
        oracle_global = solve_global_oracle(dataset, method=method)
    if oracles_per_round is None:
        oracles_per_round = solve_round_oracles(dataset, method=method)
    per_round, total, clamped = dynamic_regret(trace, dataset, oracles_per_round, scaling=scaling)
    return RegretReport(
        dynamic_regret=total,
        static_regret=static_regret(trace, dataset, oracle_global),
        per_round_dynamic=per_round,
        loss_error_series=loss_error_series(trace, dataset, oracle_global),
        oracle_global=oracle_global,
        oracle_per_round=tuple(oracles_per_round),
        local_static_regret=local_static_regret(trace, dataset, oracle_global),
        scaling=RegretScaling(scaling),
        clamped_rounds=clamped,
    )


def export_regret_csv(report: RegretReport, directory: Path) -> Path:
    rows = (
        [r, report.per_round_dynamic[r], report.loss_error_series[r], oracle.min_value, oracle.converged]
        for r, oracle in enumerate(report.oracle_per_round)
    )
    return write_versioned_csv(
        Path(directory) / REGRET_FILE,
        ["round", "per_round_dynamic", "loss_error", "oracle_min_value", "oracle_converged"],
        rows,
        comments={
            "dynamic_regret": report.dynamic_regret,
            "static_regret": report.static_regret,
            "local_static_regret": report.local_static_regret,
            "scaling": report.scaling.value,
            "global_min_value": report.oracle_global.min_value,
            "global_ridge": report.oracle_global.ridge,
        },
    )


@dataclass(frozen=True)
class SmoothnessDiagnostic:
    checked: int
    violations: int
    worst_ratio: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def smoothness_diagnostic(
    dataset: StreamDataset,
    r: int,
    oracle: OracleSolution,
    smoothness: float,
    *,
    samples: int = 20,
    seed: int = 0,
    radius: float = 1.0,
) -> SmoothnessDiagnostic:
    """随机点上检查 ‖∇f^r(x)‖² ≤ 2L̂(f^r(x) − f̂^r*)；L̂ 只是估计，违例只记警告。"""
    features, labels = dataset.round_slice(r)
    features = features.reshape(-1, dataset.d)
    labels = labels.reshape(-1).astype(float)
    rng = np.random.default_rng(seed)
    violations = 0
    worst = 0.0
    for _ in range(samples):
        x = oracle.minimizer + radius * rng.standard_normal(dataset.d)
        value, gradient = _objective(x, features, labels, 0.0)
        gap = max(value - oracle.min_value, 0.0)
        lhs = float(gradient @ gradient)
        rhs = 2.0 * smoothness * gap
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
        worst = max(worst, ratio)
        if lhs > rhs + TOL_SLACK:
            violations += 1
    if violations:
        logger.warning("第 %d 轮梯度范数检查有 %d/%d 个点违例（最差比值 %.3g）", r, violations, samples, worst)
    return SmoothnessDiagnostic(checked=samples, violations=violations, worst_ratio=float(worst))


__all__ = [
    "ORACLE_TOL",
    "RIDGE_FALLBACK",
    "TOL_SLACK",
    "OracleMethod",
    "OracleSolution",
    "RegretReport",
    "RegretScaling",
    "SmoothnessDiagnostic",
    "build_regret_report",
    "dynamic_regret",
    "export_regret_csv",
    "is_linearly_separable",
    "local_static_regret",
    "loss_error",
    "loss_error_series",
    "smoothness_diagnostic",
    "solve_global_oracle",
    "solve_offline",
    "solve_round_oracles",
    "static_regret",
]
