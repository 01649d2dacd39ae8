"""Gaussian noise calibration for the correlated mechanism and the independent zCDP baseline.

噪声方差按坐标给出（𝒩(0, V²)^{R×d}），对数一律取自然对数。
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import blake3
import numpy as np

from app.schemas.config import NoiseMechanism, PrivacyBudget
from app.services.exceptions import (
    InvalidDimensionError,
    InvalidPrivacyParameterError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

# 生成器算法与正态变换固定在这里；改动任何一项都必须升级版本号
NOISE_GENERATOR_TAG = "numpy-pcg64-standard_normal-v1"
SENSITIVITY_SLACK = 1e-9


@dataclass(frozen=True)
class NoiseCalibration:
    variance: float
    std: float
    mechanism: NoiseMechanism
    clip_bound: float
    gamma: float
    sensitivity_scale: float = 1.0
    rho: Optional[float] = None

    def as_metadata(self) -> dict[str, object]:
        return {
            "mechanism": self.mechanism.value,
            "variance": self.variance,
            "std": self.std,
            "clip_bound": self.clip_bound,
            "gamma": self.gamma,
            "sensitivity_scale": self.sensitivity_scale,
            "rho": self.rho,
            "noise_generator": NOISE_GENERATOR_TAG,
        }


@dataclass(frozen=True)
class SensitivityCheck:
    lhs: float
    bound: float
    ok: bool
    changed_rows: tuple[int, ...]

    @property
    def ratio(self) -> float:
        """lhs / (2γB_g)：实际差异相对理论上界的占比。"""
        return self.lhs / self.bound if self.bound > 0 else 0.0


def _validate_budget(budget: PrivacyBudget) -> None:
    # PrivacyBudget 自身已校验；model_construct 绕过校验时这里兜底
    if not (budget.epsilon > 0 and math.isfinite(budget.epsilon)):
        raise InvalidPrivacyParameterError(f"epsilon 必须为正数，当前为 {budget.epsilon}")
    if not 0 < budget.delta < 1:
        raise InvalidPrivacyParameterError(f"delta 必须位于 (0, 1)，当前为 {budget.delta}")


def _validate_positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise InvalidPrivacyParameterError(f"{name} 必须为正数，当前为 {value}")


def _calibration(
    variance: float,
    mechanism: NoiseMechanism,
    clip_bound: float,
    gamma: float,
    sensitivity_scale: float,
    rho: Optional[float] = None,
) -> NoiseCalibration:
    return NoiseCalibration(
        variance=variance,
        std=math.sqrt(variance),
        mechanism=mechanism,
        clip_bound=clip_bound,
        gamma=gamma,
        sensitivity_scale=sensitivity_scale,
        rho=rho,
    )


def calibrate_correlated(
    budget: PrivacyBudget,
    clip_bound: float,
    gamma: float,
    *,
    sensitivity_scale: float = 1.0,
) -> NoiseCalibration:
    """V² = 4γ²(s·B_g)²(2 ln(1/δ) + ε)/ε²，s 为敏感度读法的缩放（literal 时为 1）。"""
    _validate_budget(budget)
    _validate_positive("clip_bound", clip_bound)
    _validate_positive("gamma", gamma)
    _validate_positive("sensitivity_scale", sensitivity_scale)
    eps = budget.epsilon
    effective_bound = sensitivity_scale * clip_bound
    variance = 4.0 * gamma**2 * effective_bound**2 * (2.0 * math.log(1.0 / budget.delta) + eps) / eps**2
    return _calibration(variance, NoiseMechanism.CORRELATED_MF, clip_bound, gamma, sensitivity_scale)


def zcdp_rho(budget: PrivacyBudget) -> float:
    """ρ = (√(ε + ln 1/δ) − √(ln 1/δ))²，按 ε/(√(ε+L)+√L) 计算以避免相消。"""
    _validate_budget(budget)
    log_term = math.log(1.0 / budget.delta)
    root_gap = budget.epsilon / (math.sqrt(budget.epsilon + log_term) + math.sqrt(log_term))
    return root_gap * root_gap


def calibrate_independent_zcdp(
    budget: PrivacyBudget,
    clip_bound: float,
    *,
    sensitivity_scale: float = 1.0,
) -> NoiseCalibration:
    _validate_positive("clip_bound", clip_bound)
    _validate_positive("sensitivity_scale", sensitivity_scale)
    rho = zcdp_rho(budget)
    effective_bound = sensitivity_scale * clip_bound
    variance = 2.0 * effective_bound**2 / rho
    return _calibration(variance, NoiseMechanism.INDEPENDENT_ZCDP, clip_bound, 1.0, sensitivity_scale, rho)


def calibrate_none(clip_bound: float = 1.0) -> NoiseCalibration:
    _validate_positive("clip_bound", clip_bound)
    return _calibration(0.0, NoiseMechanism.NONE, clip_bound, 1.0, 1.0)


def resolve_sensitivity_scale(
    reading: Union[Literal["literal", "averaged"], float],
    mechanism: NoiseMechanism | str,
    *,
    n: int,
    tau: int,
) -> float:
    """literal → 1；averaged → 相关机制 1/(nτ)，独立基线 1/n；数值则原样使用。"""
    mechanism = NoiseMechanism(mechanism)
    if isinstance(reading, str):
        if reading == "literal":
            return 1.0
        if reading != "averaged":
            raise InvalidPrivacyParameterError(f"未知的敏感度读法：{reading!r}")
        if n < 1 or tau < 1:
            raise InvalidDimensionError(f"n 与 tau 必须 ≥ 1，当前为 n={n}, tau={tau}")
        if mechanism is NoiseMechanism.INDEPENDENT_ZCDP:
            return 1.0 / n
        if mechanism is NoiseMechanism.CORRELATED_MF:
            return 1.0 / (n * tau)
        return 1.0
    _validate_positive("sensitivity_scale", float(reading))
    return float(reading)


def derive_child_seed(parent: int, label: Union[str, int]) -> int:
    """child = blake3(parent/label) 的前 8 字节（小端），同一 (parent, label) 永远得到同一种子。"""
    digest = blake3.blake3(f"{int(parent)}/{label}".encode("utf-8")).digest(length=8)
    return int.from_bytes(digest, "little")


def sample_noise_matrix(R: int, d: int, calib: NoiseCalibration, seed: int) -> np.ndarray:
    """由 PCG64(seed) 的 standard_normal 生成 R×d 噪声并乘以 V。"""
    if R < 1 or d < 1:
        raise InvalidDimensionError(f"噪声矩阵维度必须 ≥ 1，当前为 R={R}, d={d}")
    if calib.variance == 0.0:
        return np.zeros((R, d))
    generator = np.random.Generator(np.random.PCG64(int(seed)))
    return generator.standard_normal((R, d)) * calib.std


def check_sensitivity(
    c_matrix: np.ndarray,
    gradients: np.ndarray,
    gradients_prime: np.ndarray,
    clip_bound: float,
    gamma: float,
    *,
    changed_row: Optional[int] = None,
) -> SensitivityCheck:
    """检查 ‖C(G − G′)‖_F ≤ 2γB_g；给出 changed_row 时还要求其余行完全相同。"""
    G = np.asarray(gradients, dtype=float)
    G_prime = np.asarray(gradients_prime, dtype=float)
    C = np.asarray(c_matrix, dtype=float)
    if G.shape != G_prime.shape or G.ndim != 2:
        raise ShapeMismatchError(f"梯度堆叠形状不一致：{G.shape} vs {G_prime.shape}")
    if C.ndim != 2 or C.shape[1] != G.shape[0]:
        raise ShapeMismatchError(f"C 的形状 {C.shape} 与梯度堆叠 {G.shape} 不匹配")

    difference = G - G_prime
    changed_rows = tuple(int(r) for r in np.flatnonzero(np.any(difference != 0.0, axis=1)))
    lhs = float(np.linalg.norm(C @ difference))
    bound = 2.0 * gamma * clip_bound
    ok = lhs <= bound + SENSITIVITY_SLACK
    if changed_row is not None and any(r != changed_row for r in changed_rows):
        logger.warning("邻接数据只应改变第 %d 行，实际改变了 %s", changed_row, changed_rows)
        ok = False
    return SensitivityCheck(lhs=lhs, bound=bound, ok=ok, changed_rows=changed_rows)


__all__ = [
    "NOISE_GENERATOR_TAG",
    "NoiseCalibration",
    "SensitivityCheck",
    "calibrate_correlated",
    "calibrate_independent_zcdp",
    "calibrate_none",
    "check_sensitivity",
    "derive_child_seed",
    "resolve_sensitivity_scale",
    "sample_noise_matrix",
    "zcdp_rho",
]
