"""Prefix-sum workload and its factorizations A = B·C with γ(C) = 1.

分解只依赖 R，离线计算一次；结果可以导出为 CSV 包缓存（B.csv / C.csv / meta.csv）。
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import solve_triangular, toeplitz

from app.services.exceptions import CacheFormatError, InvalidDimensionError
from app.storage.constants import (
    FACTORIZATION_B_FILE,
    FACTORIZATION_C_FILE,
    FACTORIZATION_META_FILE,
)
from app.storage.csv_store import (
    read_matrix_csv,
    read_versioned_csv,
    write_matrix_csv,
    write_versioned_csv,
)

logger = logging.getLogger(__name__)

RECONSTRUCTION_TOL = 1e-8
GAMMA_TOL = 1e-6
_MIN_DIAGONAL = 1e-12


class FactorizationMethod(str, Enum):
    TRIVIAL_IDENTITY_C = "trivial_identity_c"
    TRIVIAL_IDENTITY_B = "trivial_identity_b"
    SQRT_NORMALIZED = "sqrt_normalized"
    OPTIMIZED = "optimized"


class TrivialKind(str, Enum):
    C_IDENTITY = "c_identity"
    B_IDENTITY = "b_identity"


@dataclass(frozen=True)
class WorkloadMatrix:
    dim: int
    entries: np.ndarray

    def __post_init__(self) -> None:
        validate_workload(self)


@dataclass(frozen=True)
class Factorization:
    b_matrix: np.ndarray
    c_matrix: np.ndarray
    gamma: float
    frob_sq_b: float
    method_tag: FactorizationMethod
    converged: bool = True
    iterations: int = 0

    @property
    def dim(self) -> int:
        return int(self.b_matrix.shape[0])

    def reconstruction_error(self, workload: WorkloadMatrix) -> float:
        """‖A − BC‖_F / ‖A‖_F。"""
        residual = workload.entries - self.b_matrix @ self.c_matrix
        return float(np.linalg.norm(residual) / np.linalg.norm(workload.entries))

    def row_differences(self) -> np.ndarray:
        """第 r 行为 b^{r+1} − b^r（约定 b^0 = 0）。"""
        return np.diff(self.b_matrix, axis=0, prepend=np.zeros((1, self.dim)))


def max_column_norm(matrix: np.ndarray) -> float:
    # 并列时 argmax 取第一个下标；下游只用数值
    norms = np.linalg.norm(np.asarray(matrix, dtype=float), axis=0)
    return float(norms[int(np.argmax(norms))])


def validate_workload(workload: WorkloadMatrix) -> None:
    entries = np.asarray(workload.entries)
    if workload.dim < 1:
        raise InvalidDimensionError(f"工作负载维度必须 ≥ 1，当前为 {workload.dim}")
    if entries.shape != (workload.dim, workload.dim):
        raise InvalidDimensionError(f"工作负载形状 {entries.shape} 与维度 {workload.dim} 不一致")
    if not np.array_equal(entries, np.tril(np.ones((workload.dim, workload.dim)))):
        raise InvalidDimensionError("只支持前缀和工作负载（对角线及以下全为 1 的下三角矩阵）")


def build_prefix_workload(R: int) -> WorkloadMatrix:
    if int(R) != R or R < 1:
        raise InvalidDimensionError(f"R 必须是正整数，当前为 {R}")
    R = int(R)
    return WorkloadMatrix(dim=R, entries=np.tril(np.ones((R, R))))


def _make_factorization(
    b_matrix: np.ndarray,
    c_matrix: np.ndarray,
    method: FactorizationMethod,
    *,
    converged: bool = True,
    iterations: int = 0,
) -> Factorization:
    b_matrix = np.ascontiguousarray(b_matrix, dtype=float)
    c_matrix = np.ascontiguousarray(c_matrix, dtype=float)
    b_matrix.setflags(write=False)
    c_matrix.setflags(write=False)
    return Factorization(
        b_matrix=b_matrix,
        c_matrix=c_matrix,
        gamma=max_column_norm(c_matrix),
        frob_sq_b=float(np.sum(b_matrix * b_matrix)),
        method_tag=method,
        converged=converged,
        iterations=iterations,
    )


def rescale_factorization(factorization: Factorization, alpha: float) -> Factorization:
    """(αB, C/α) 重构同一个 A；归一化步骤就是这种缩放。"""
    if alpha <= 0:
        raise InvalidDimensionError(f"缩放系数必须为正，当前为 {alpha}")
    return _make_factorization(
        factorization.b_matrix * alpha,
        factorization.c_matrix / alpha,
        factorization.method_tag,
        converged=factorization.converged,
        iterations=factorization.iterations,
    )


def factorize_trivial(workload: WorkloadMatrix, which: TrivialKind | str) -> Factorization:
    validate_workload(workload)
    kind = TrivialKind(which)
    R = workload.dim
    identity = np.eye(R)
    if kind is TrivialKind.C_IDENTITY:
        return _make_factorization(workload.entries.copy(), identity, FactorizationMethod.TRIVIAL_IDENTITY_C)
    # γ(A) = √R，由第一列取得
    scale = math.sqrt(R)
    return _make_factorization(identity * scale, workload.entries / scale, FactorizationMethod.TRIVIAL_IDENTITY_B)


def sqrt_toeplitz_coefficients(R: int) -> np.ndarray:
    """c_0 = 1, c_k = c_{k-1}(2k−1)/(2k)，即 binom(2k, k)/4^k。"""
    if R < 1:
        raise InvalidDimensionError(f"R 必须 ≥ 1，当前为 {R}")
    k = np.arange(1, R, dtype=float)
    return np.concatenate([[1.0], np.cumprod((2.0 * k - 1.0) / (2.0 * k))])


def prefix_square_root(R: int) -> np.ndarray:
    """A 的唯一正对角下三角平方根 M（下三角 Toeplitz），满足 M·M = A。"""
    coefficients = sqrt_toeplitz_coefficients(R)
    return toeplitz(coefficients, np.zeros(R))


def factorize_sqrt_normalized(workload: WorkloadMatrix) -> Factorization:
    validate_workload(workload)
    root = prefix_square_root(workload.dim)
    gamma0 = max_column_norm(root)
    return _make_factorization(root * gamma0, root / gamma0, FactorizationMethod.SQRT_NORMALIZED)


def _solve_b(workload: np.ndarray, c_matrix: np.ndarray) -> np.ndarray:
    # B = A·C^{-1}：解 C^T B^T = A^T
    return solve_triangular(c_matrix, workload.T, trans="T", lower=True).T


def _objective_gradient(b_matrix: np.ndarray, c_matrix: np.ndarray) -> np.ndarray:
    # ∇_C ‖A C^{-1}‖_F^2 = −2 B^T B C^{-T}，限制在下三角空间
    z_t = solve_triangular(c_matrix, b_matrix.T, lower=True)
    return np.tril(-2.0 * b_matrix.T @ z_t.T)


def _project_columns(c_matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(c_matrix, axis=0)
    return c_matrix / np.maximum(norms, 1.0)


def factorize_optimized(
    workload: WorkloadMatrix,
    max_iters: int = 500,
    tol: float = 1e-9,
) -> Factorization:
    """在 {max 列范数 ≤ 1} 上对 C 做投影梯度下降，从 sqrt_normalized 出发，不增则步长减半。"""
    validate_workload(workload)
    if max_iters < 1:
        raise InvalidDimensionError(f"max_iters 必须 ≥ 1，当前为 {max_iters}")
    if tol <= 0:
        raise InvalidDimensionError(f"tol 必须为正，当前为 {tol}")

    start = factorize_sqrt_normalized(workload)
    A = workload.entries
    c_matrix = np.array(start.c_matrix)
    b_matrix = np.array(start.b_matrix)
    objective = start.frob_sq_b
    gradient = _objective_gradient(b_matrix, c_matrix)
    grad_norm = float(np.linalg.norm(gradient))
    step = 0.5 * float(np.linalg.norm(c_matrix)) / grad_norm if grad_norm > 0 else 0.0

    converged = grad_norm == 0.0
    iterations = 0
    while not converged and iterations < max_iters:
        iterations += 1
        candidate = _project_columns(c_matrix - step * gradient)
        accepted = False
        if np.min(np.abs(np.diag(candidate))) > _MIN_DIAGONAL:
            candidate_b = _solve_b(A, candidate)
            candidate_objective = float(np.sum(candidate_b * candidate_b))
            if np.isfinite(candidate_objective) and candidate_objective < objective:
                improvement = objective - candidate_objective
                c_matrix, b_matrix, objective = candidate, candidate_b, candidate_objective
                gradient = _objective_gradient(b_matrix, c_matrix)
                accepted = True
                step *= 2.0
                if improvement <= tol * max(1.0, objective):
                    converged = True
        if not accepted:
            step *= 0.5
            if step < 1e-15:
                converged = True

    if not converged:
        logger.warning("factorize_optimized 未在 %d 次迭代内收敛（R=%d），返回当前最优迭代", max_iters, workload.dim)

    # 投影后 γ ≤ 1，重新归一化到 γ = 1 只会让目标更小
    gamma = max_column_norm(c_matrix)
    c_matrix = c_matrix / gamma
    b_matrix = _solve_b(A, c_matrix)
    result = _make_factorization(
        b_matrix,
        c_matrix,
        FactorizationMethod.OPTIMIZED,
        converged=converged,
        iterations=iterations,
    )
    if result.frob_sq_b > start.frob_sq_b:
        return _make_factorization(
            start.b_matrix,
            start.c_matrix,
            FactorizationMethod.OPTIMIZED,
            converged=converged,
            iterations=iterations,
        )
    return result


def factorize(
    workload: WorkloadMatrix,
    method: FactorizationMethod | str,
    *,
    max_iters: int = 500,
    tol: float = 1e-9,
) -> Factorization:
    method = FactorizationMethod(method)
    if method is FactorizationMethod.TRIVIAL_IDENTITY_C:
        return factorize_trivial(workload, TrivialKind.C_IDENTITY)
    if method is FactorizationMethod.TRIVIAL_IDENTITY_B:
        return factorize_trivial(workload, TrivialKind.B_IDENTITY)
    if method is FactorizationMethod.SQRT_NORMALIZED:
        return factorize_sqrt_normalized(workload)
    return factorize_optimized(workload, max_iters=max_iters, tol=tol)


@dataclass(frozen=True)
class BNormRow:
    R: int
    frob_sq_b: float
    ratio: float


def bnorm_study(R_list: Iterable[int], method: FactorizationMethod | str) -> list[BNormRow]:
    rows: list[BNormRow] = []
    for R in R_list:
        factorization = factorize(build_prefix_workload(R), method)
        rows.append(BNormRow(R=int(R), frob_sq_b=factorization.frob_sq_b, ratio=factorization.frob_sq_b / float(R) ** 2))
    return rows


# ----------------------------------------------------------------------
# CSV 缓存包
# ----------------------------------------------------------------------


def save_factorization(factorization: Factorization, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(directory / FACTORIZATION_B_FILE, factorization.b_matrix)
    write_matrix_csv(directory / FACTORIZATION_C_FILE, factorization.c_matrix)
    write_versioned_csv(
        directory / FACTORIZATION_META_FILE,
        ["R", "gamma", "frob_sq_b", "method_tag", "converged", "iterations"],
        [[
            factorization.dim,
            factorization.gamma,
            factorization.frob_sq_b,
            factorization.method_tag.value,
            factorization.converged,
            factorization.iterations,
        ]],
    )
    return directory


def load_factorization(directory: Path) -> Factorization:
    directory = Path(directory)
    _, header, rows = read_versioned_csv(directory / FACTORIZATION_META_FILE)
    if len(rows) != 1:
        raise CacheFormatError(f"分解元数据应只有一行：{directory}")
    meta = dict(zip(header, rows[0]))
    b_matrix = read_matrix_csv(directory / FACTORIZATION_B_FILE)
    c_matrix = read_matrix_csv(directory / FACTORIZATION_C_FILE)
    R = int(meta["R"])
    if b_matrix.shape != (R, R) or c_matrix.shape != (R, R):
        raise CacheFormatError(f"缓存矩阵形状与 R={R} 不一致：{directory}")
    factorization = _make_factorization(
        b_matrix,
        c_matrix,
        FactorizationMethod(meta["method_tag"]),
        converged=meta.get("converged", "true") == "true",
        iterations=int(meta.get("iterations", 0)),
    )
    if abs(factorization.gamma - float(meta["gamma"])) > 1e-12 * max(1.0, factorization.gamma):
        raise CacheFormatError(f"缓存中的 gamma 与矩阵不一致：{directory}")
    return factorization


def cache_directory_for(cache_root: Path, R: int, method: FactorizationMethod | str) -> Path:
    return Path(cache_root) / f"{FactorizationMethod(method).value}_R{int(R)}"


def get_or_build_factorization(
    R: int,
    method: FactorizationMethod | str,
    *,
    cache_dir: Optional[Path] = None,
) -> Factorization:
    """有缓存目录时优先读取；读不到或格式不对则重新计算并写回。"""
    method = FactorizationMethod(method)
    workload = build_prefix_workload(R)
    if cache_dir is None:
        return factorize(workload, method)
    target = cache_directory_for(cache_dir, R, method)
    if (target / FACTORIZATION_META_FILE).exists():
        try:
            cached = load_factorization(target)
        except CacheFormatError as exc:
            logger.warning("分解缓存不可用，重新计算：%s", exc)
        else:
            if cached.reconstruction_error(workload) <= RECONSTRUCTION_TOL:
                return cached
            logger.warning("分解缓存重构误差超限，重新计算：%s", target)
    factorization = factorize(workload, method)
    save_factorization(factorization, target)
    logger.info("分解已缓存：%s (‖B‖²_F=%.6g)", target, factorization.frob_sq_b)
    return factorization


__all__ = [
    "BNormRow",
    "Factorization",
    "FactorizationMethod",
    "GAMMA_TOL",
    "RECONSTRUCTION_TOL",
    "TrivialKind",
    "WorkloadMatrix",
    "bnorm_study",
    "build_prefix_workload",
    "cache_directory_for",
    "factorize",
    "factorize_optimized",
    "factorize_sqrt_normalized",
    "factorize_trivial",
    "get_or_build_factorization",
    "load_factorization",
    "max_column_norm",
    "prefix_square_root",
    "rescale_factorization",
    "save_factorization",
    "sqrt_toeplitz_coefficients",
    "validate_workload",
]
