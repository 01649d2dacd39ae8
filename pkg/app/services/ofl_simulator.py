"""Online federated learning with correlated (matrix-factorization) noise and the independent-noise baseline.

每轮：学习器从 x^r 出发做 τ 步裁剪 SGD，服务器按平均本地模型更新并加噪声；
相关噪声机制下额外维护虚拟迭代 x_ξ^r，并在线检查实现内部的恒等式。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from app.schemas.config import NoiseMechanism, SimConfig, StepSchedule
from app.services.data_stream import (
    StreamDataset,
    batch_gradients_clipped,
    batch_losses,
    smoothness_estimate,
)
from app.services.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    InternalConsistencyError,
    MissingFactorizationError,
)
from app.services.privacy_accounting import (
    NoiseCalibration,
    calibrate_correlated,
    calibrate_independent_zcdp,
    calibrate_none,
    sample_noise_matrix,
)
from app.services.workload_factorization import Factorization
from app.storage.constants import TRACE_FILE, TRACE_MODELS_FILE
from app.storage.csv_store import write_versioned_csv

logger = logging.getLogger(__name__)

EQUIVALENCE_TOL = 1e-10
VIRTUAL_TOL = 1e-9
STACKED_TOL = 1e-9
DEFAULT_STEP_SCALE = 0.125
_MODULE = "ofl_simulator"


@dataclass(frozen=True)
class LearnerState:
    learner_id: int
    local_model: np.ndarray


@dataclass(frozen=True)
class LocalRoundResult:
    final_models: np.ndarray  # (n, d)：z_i^{r,τ}
    gradients: np.ndarray  # (n, τ, d)：∇f_i^{r,t}(z_i^{r,t})，已裁剪
    losses: np.ndarray  # (n, τ)：f_i^{r,t}(z_i^{r,t})

    @property
    def mean_local_model(self) -> np.ndarray:
        return np.mean(self.final_models, axis=0)

    @property
    def gradient_row(self) -> np.ndarray:
        """g^r = (1/(nτ)) Σ_i Σ_t ∇f_i^{r,t}(z_i^{r,t})。"""
        n, tau, _ = self.gradients.shape
        return np.sum(self.gradients, axis=(0, 1)) / (n * tau)

    def learner_states(self) -> list[LearnerState]:
        return [LearnerState(learner_id=i, local_model=model) for i, model in enumerate(self.final_models)]


@dataclass(frozen=True)
class SimulationTrace:
    config: SimConfig
    mechanism: NoiseMechanism
    seed: int
    calibration: NoiseCalibration
    global_models: np.ndarray  # (R+1, d)
    gradient_stack: np.ndarray  # (R, d)
    noise_rows_applied: np.ndarray  # (R, d)
    round_mean_losses: np.ndarray  # (R,)：f^r(x^r)
    local_loss_sums: np.ndarray  # (R,)：Σ_{i,t} f_i^{r,t}(z_i^{r,t})
    step_sizes: np.ndarray  # (R,)：服务器实际使用的 η̃_r
    equivalence_residuals: np.ndarray
    virtual_residuals: np.ndarray
    max_drift_ratio: float
    smoothness: float
    baseline_eta: Optional[float] = None
    virtual_iterates: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    factorization_tag: Optional[str] = None

    @property
    def R(self) -> int:
        return int(self.gradient_stack.shape[0])

    @property
    def released_models(self) -> np.ndarray:
        """x^0..x^{R-1}：第 r 轮评估 f^r 用到的模型。"""
        return self.global_models[:-1]


def default_local_step(
    smoothness: float,
    tau: int,
    *,
    eta_g: float = 1.0,
    step_scale: float = DEFAULT_STEP_SCALE,
) -> float:
    """η = step_scale / (L̂·η_g·τ)，使 η̃ = η·η_g·τ = step_scale / L̂。"""
    if smoothness <= 0 or tau < 1 or eta_g <= 0 or step_scale <= 0:
        raise ConfigurationError(f"无法推导步长：L̂={smoothness}, τ={tau}, η_g={eta_g}, step_scale={step_scale}")
    return step_scale / (smoothness * eta_g * tau)


def step_schedule_sizes(eta_tilde: float, R: int, schedule: StepSchedule | str) -> np.ndarray:
    schedule = StepSchedule(schedule)
    if schedule is StepSchedule.CONSTANT:
        return np.full(R, float(eta_tilde))
    return float(eta_tilde) / np.arange(1, R + 1, dtype=float)


def check_step_size(effective_step: float, smoothness: float) -> bool:
    limit = 1.0 / (8.0 * smoothness)
    if effective_step > limit:
        logger.warning("有效步长 %.6g 超过 1/(8L̂)=%.6g（L̂=%.6g），收敛保证不再适用", effective_step, limit, smoothness)
        return False
    return True


def local_round_all(
    x_r: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    eta: float,
    clip_bound: float,
) -> LocalRoundResult:
    """所有学习器同时做 τ 步本地 SGD；features (n, τ, d), labels (n, τ)。"""
    n, tau, d = features.shape
    models = np.tile(np.asarray(x_r, dtype=float), (n, 1))
    gradients = np.empty((n, tau, d))
    losses = np.empty((n, tau))
    for t in range(tau):
        losses[:, t] = batch_losses(models, features[:, t], labels[:, t])
        gradients[:, t] = batch_gradients_clipped(models, features[:, t], labels[:, t], clip_bound)
        models = models - eta * gradients[:, t]
    return LocalRoundResult(final_models=models, gradients=gradients, losses=losses)


def local_round(
    x_r: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    eta: float,
    clip_bound: float,
) -> tuple[np.ndarray, np.ndarray]:
    """单个学习器的一轮：返回 z^{r,τ} 与沿轨迹的 τ 个梯度。"""
    result = local_round_all(x_r, features[None], labels[None], eta, clip_bound)
    return result.final_models[0], result.gradients[0]


def _averaged_model_update(
    x_r: np.ndarray,
    mean_local_model: np.ndarray,
    noise_row: np.ndarray,
    eta: float,
    eta_g: float,
    tau: int,
    gradient_row: Optional[np.ndarray],
    step: Optional[float],
) -> tuple[np.ndarray, float]:
    eta_tilde = eta * eta_g * tau if step is None else step
    if eta == 0.0:
        if gradient_row is None:
            raise ConfigurationError("η = 0 时无法由本地模型恢复梯度方向，必须提供 gradient_row")
        return x_r - eta_tilde * (gradient_row + noise_row), 0.0

    direction = (x_r - mean_local_model) / (eta * tau)
    residual = 0.0
    if gradient_row is not None:
        scale = float(
            np.linalg.norm(gradient_row)
            + (np.linalg.norm(x_r) + np.linalg.norm(mean_local_model)) / (eta * tau)
        )
        residual = float(np.linalg.norm(direction - gradient_row))
        if residual > EQUIVALENCE_TOL * scale:
            raise InternalConsistencyError(
                f"(x^r − mean z)/(ητ) 与 g^r 相差 {residual:.3e}（尺度 {scale:.3e}）",
                invariant="averaged_model_equivalence",
                module=_MODULE,
            )
        residual = residual / scale if scale > 0 else 0.0
    return x_r - eta_tilde * (direction + noise_row), residual


def server_step_correlated(
    x_r: np.ndarray,
    mean_local_model: np.ndarray,
    noise_row: np.ndarray,
    eta: float,
    eta_g: float,
    tau: int,
    *,
    gradient_row: Optional[np.ndarray] = None,
    step: Optional[float] = None,
) -> np.ndarray:
    """x^{r+1} = x^r − η̃((x^r − mean z)/(ητ) + (b^{r+1} − b^r)ξ)。

    noise_row 是已经乘好的 (b^{r+1} − b^r)ξ；给出 gradient_row 时同时核对它与本地模型差的等价性。
    """
    x_next, _ = _averaged_model_update(x_r, mean_local_model, noise_row, eta, eta_g, tau, gradient_row, step)
    return x_next


def server_step_independent(
    x_r: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    eta: float,
    noise_row: np.ndarray,
    clip_bound: float,
) -> np.ndarray:
    """x^{r+1} = x^r − η((1/n) Σ_i Σ_t ∇f_i^{r,t}(x^r) + ζ)：对 t 求和而非平均。"""
    n = features.shape[0]
    gradients = batch_gradients_clipped(x_r, features, labels, clip_bound)
    return x_r - eta * (np.sum(gradients, axis=(0, 1)) / n + noise_row)


def _check_dimensions(config: SimConfig, dataset: StreamDataset) -> None:
    expected = (config.n, config.R, config.tau, config.d)
    actual = (dataset.n, dataset.R, dataset.tau, dataset.d)
    if expected != actual:
        raise DimensionMismatchError(f"配置维度 (n, R, τ, d)={expected} 与数据集 {actual} 不一致")


def _calibrate(config: SimConfig, factorization: Optional[Factorization]) -> NoiseCalibration:
    if config.mechanism is NoiseMechanism.CORRELATED_MF:
        if factorization is None:
            raise MissingFactorizationError("correlated_mf 机制需要提供分解 A = BC")
        if factorization.dim != config.R:
            raise DimensionMismatchError(f"分解维度 {factorization.dim} 与 R={config.R} 不一致")
        return calibrate_correlated(
            config.budget, config.clip_bound, factorization.gamma, sensitivity_scale=config.sensitivity_scale
        )
    if config.mechanism is NoiseMechanism.INDEPENDENT_ZCDP:
        return calibrate_independent_zcdp(config.budget, config.clip_bound, sensitivity_scale=config.sensitivity_scale)
    return calibrate_none(config.clip_bound)


def run_simulation(
    config: SimConfig,
    dataset: StreamDataset,
    factorization: Optional[Factorization] = None,
    *,
    x0: Optional[np.ndarray] = None,
) -> SimulationTrace:
    _check_dimensions(config, dataset)
    calibration = _calibrate(config, factorization)
    R, d = config.R, config.d
    smoothness = config.smoothness_estimate or smoothness_estimate(dataset)
    x = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (d,):
        raise DimensionMismatchError(f"x0 维度 {x.shape} 与 d={d} 不一致")

    # ξ 一次性按 R×d 生成；独立基线把各行当作每轮新鲜的 ζ
    xi = sample_noise_matrix(R, d, calibration, config.seed)
    mechanism = config.mechanism
    if mechanism is NoiseMechanism.CORRELATED_MF:
        noise_rows = factorization.row_differences() @ xi
    else:
        noise_rows = xi

    baseline_eta: Optional[float] = None
    if mechanism is NoiseMechanism.INDEPENDENT_ZCDP:
        baseline_eta = config.baseline_eta if config.baseline_eta is not None else config.eta_tilde / config.tau
        steps = np.full(R, baseline_eta)
        check_step_size(baseline_eta * config.tau, smoothness)
    else:
        steps = step_schedule_sizes(config.eta_tilde, R, config.step_schedule)
        check_step_size(float(steps[0]), smoothness)

    models = np.empty((R + 1, d))
    models[0] = x
    gradient_stack = np.empty((R, d))
    round_mean_losses = np.empty(R)
    local_loss_sums = np.empty(R)
    equivalence_residuals = np.zeros(R)
    virtual_residuals = np.zeros(R)
    track_virtual = mechanism is not NoiseMechanism.INDEPENDENT_ZCDP
    virtual = np.empty((R + 1, d)) if track_virtual else None
    if virtual is not None:
        virtual[0] = x
    noise_offset = np.zeros(d)
    drift_limit = config.eta * config.tau * config.clip_bound
    max_drift_ratio = 0.0

    for r in range(R):
        features, labels = dataset.round_slice(r)
        round_mean_losses[r] = float(np.mean(batch_losses(x, features, labels)))

        if mechanism is NoiseMechanism.INDEPENDENT_ZCDP:
            gradients = batch_gradients_clipped(x, features, labels, config.clip_bound)
            gradient_stack[r] = np.sum(gradients, axis=(0, 1)) / config.n
            local_loss_sums[r] = round_mean_losses[r] * config.n * config.tau
            x = server_step_independent(x, features, labels, baseline_eta, noise_rows[r], config.clip_bound)
            models[r + 1] = x
            continue

        local = local_round_all(x, features, labels, config.eta, config.clip_bound)
        drift = float(np.max(np.linalg.norm(local.final_models - x, axis=1)))
        if drift > drift_limit + 1e-12 * (1.0 + float(np.linalg.norm(x))):
            raise InternalConsistencyError(
                f"第 {r} 轮本地漂移 {drift:.6g} 超过 ητB_g={drift_limit:.6g}",
                invariant="drift_bound",
                module=_MODULE,
            )
        if drift_limit > 0:
            max_drift_ratio = max(max_drift_ratio, drift / drift_limit)
        gradient_row = local.gradient_row
        gradient_stack[r] = gradient_row
        local_loss_sums[r] = float(np.sum(local.losses))
        x_next, equivalence_residuals[r] = _averaged_model_update(
            x,
            local.mean_local_model,
            noise_rows[r],
            config.eta,
            config.eta_g,
            config.tau,
            gradient_row,
            float(steps[r]),
        )

        # x_ξ^{r+1} = x^{r+1} + Σ_{k≤r} η̃_k (b^{k+1} − b^k)ξ，应满足 x_ξ^{r+1} = x_ξ^r − η̃_r g^r
        noise_offset = noise_offset + steps[r] * noise_rows[r]
        virtual[r + 1] = x_next + noise_offset
        expected = virtual[r] - steps[r] * gradient_row
        virtual_residuals[r] = float(np.linalg.norm(virtual[r + 1] - expected) / (1.0 + np.linalg.norm(virtual[r + 1])))
        if virtual_residuals[r] > VIRTUAL_TOL:
            raise InternalConsistencyError(
                f"第 {r} 轮虚拟迭代残差 {virtual_residuals[r]:.3e} 超过 {VIRTUAL_TOL}",
                invariant="virtual_iterate",
                module=_MODULE,
            )
        x = x_next
        models[r + 1] = x

    logger.debug(
        "仿真完成 mechanism=%s R=%d τ=%d V²=%.6g 最终 f^r=%.6g",
        mechanism.value,
        R,
        config.tau,
        calibration.variance,
        round_mean_losses[-1],
    )
    return SimulationTrace(
        config=config,
        mechanism=mechanism,
        seed=config.seed,
        calibration=calibration,
        global_models=models,
        gradient_stack=gradient_stack,
        noise_rows_applied=noise_rows,
        round_mean_losses=round_mean_losses,
        local_loss_sums=local_loss_sums,
        step_sizes=steps,
        equivalence_residuals=equivalence_residuals,
        virtual_residuals=virtual_residuals,
        max_drift_ratio=max_drift_ratio,
        smoothness=smoothness,
        baseline_eta=baseline_eta,
        virtual_iterates=virtual,
        xi=xi,
        factorization_tag=factorization.method_tag.value if factorization is not None else None,
    )


def stacked_models(
    x0: np.ndarray,
    workload: np.ndarray,
    b_matrix: np.ndarray,
    gradient_stack: np.ndarray,
    xi: np.ndarray,
    step_sizes: np.ndarray,
) -> np.ndarray:
    """一次性矩阵形式的 x^1..x^R。"""
    steps = np.asarray(step_sizes, dtype=float)
    if np.all(steps == steps[0]):
        return x0 - steps[0] * (workload @ gradient_stack + b_matrix @ xi)
    row_differences = np.diff(b_matrix, axis=0, prepend=np.zeros((1, b_matrix.shape[1])))
    return x0 - workload @ (steps[:, None] * (gradient_stack + row_differences @ xi))


def verify_stacked_form(
    trace: SimulationTrace,
    workload: np.ndarray,
    b_matrix: np.ndarray,
    xi: Optional[np.ndarray] = None,
) -> float:
    """max_r ‖x^r_stacked − x^r_trace‖ / (1 + ‖x^r_trace‖)。"""
    if trace.mechanism is NoiseMechanism.INDEPENDENT_ZCDP:
        raise ConfigurationError("矩阵形式只适用于相关噪声（或无噪声）轨迹")
    if xi is None:
        xi = trace.xi if trace.xi is not None else np.zeros_like(trace.gradient_stack)
    expected = stacked_models(trace.global_models[0], workload, b_matrix, trace.gradient_stack, xi, trace.step_sizes)
    actual = trace.global_models[1:]
    residuals = np.linalg.norm(expected - actual, axis=1) / (1.0 + np.linalg.norm(actual, axis=1))
    return float(np.max(residuals))


def replay_gradient_stack(models: np.ndarray, dataset: StreamDataset, config: SimConfig) -> np.ndarray:
    """固定已发布的 x^0..x^{R-1}，在（可能是邻接的）数据集上重算每一行 g^r。"""
    _check_dimensions(config, dataset)
    if models.shape[0] < config.R:
        raise DimensionMismatchError(f"需要至少 {config.R} 个已发布模型，实际 {models.shape[0]}")
    stack = np.empty((config.R, config.d))
    for r in range(config.R):
        features, labels = dataset.round_slice(r)
        stack[r] = local_round_all(models[r], features, labels, config.eta, config.clip_bound).gradient_row
    return stack


def export_trace_csv(trace: SimulationTrace, directory: Path, *, include_models: bool = False) -> Path:
    directory = Path(directory)
    grad_norms = np.linalg.norm(trace.gradient_stack, axis=1)
    noise_norms = np.linalg.norm(trace.noise_rows_applied, axis=1)
    comments = {
        "mechanism": trace.mechanism.value,
        "seed": trace.seed,
        "R": trace.R,
        "tau": trace.config.tau,
        "eta": trace.config.eta,
        "eta_g": trace.config.eta_g,
        "eta_tilde": trace.config.eta_tilde,
        "variance": trace.calibration.variance,
    }
    rows = (
        [r, trace.round_mean_losses[r], grad_norms[r], noise_norms[r], trace.virtual_residuals[r]]
        for r in range(trace.R)
    )
    path = write_versioned_csv(
        directory / TRACE_FILE,
        ["round", "mean_round_loss", "grad_norm", "noise_row_norm", "virtual_residual"],
        rows,
        comments=comments,
    )
    if include_models:
        d = trace.global_models.shape[1]
        write_versioned_csv(
            directory / TRACE_MODELS_FILE,
            ["round", *[f"coord_{j + 1}" for j in range(d)]],
            ([r, *trace.global_models[r].tolist()] for r in range(trace.R + 1)),
            comments={"mechanism": trace.mechanism.value, "seed": trace.seed},
        )
    return path


__all__ = [
    "DEFAULT_STEP_SCALE",
    "LearnerState",
    "LocalRoundResult",
    "SimulationTrace",
    "check_step_size",
    "default_local_step",
    "export_trace_csv",
    "local_round",
    "local_round_all",
    "replay_gradient_stack",
    "run_simulation",
    "server_step_correlated",
    "server_step_independent",
    "stacked_models",
    "step_schedule_sizes",
    "verify_stacked_form",
]
