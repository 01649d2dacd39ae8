"""Runs the cross-module invariant checks and collects them into one pass/fail report."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from app.schemas.config import NoiseMechanism, PrivacyBudget, SimConfig
from app.schemas.results import PropertyCheckModel, PropertyReportModel
from app.services.data_stream import ClientDatum, StreamDataset, generate_synthetic
from app.services.exceptions import InvariantViolationError, ServiceError
from app.services.ofl_simulator import STACKED_TOL, replay_gradient_stack, run_simulation, verify_stacked_form
from app.services.privacy_accounting import (
    calibrate_correlated,
    calibrate_independent_zcdp,
    check_sensitivity,
    derive_child_seed,
)
from app.services.workload_factorization import (
    GAMMA_TOL,
    RECONSTRUCTION_TOL,
    Factorization,
    FactorizationMethod,
    build_prefix_workload,
    factorize,
    rescale_factorization,
)

logger = logging.getLogger(__name__)

FAULT_PERTURB_B = "perturb_b"
FAULTS = (FAULT_PERTURB_B,)

# 2B_g²/ρ 的闭式值（ε=5, δ=1e−3, B_g=1），由 ρ 的全精度值计算
ZCDP_VARIANCE_EPS5 = 2.956361101667529


@dataclass(frozen=True)
class PropertyCheck:
    name: str
    module: str
    invariant: str
    ok: bool
    detail: str = ""


@dataclass
class PropertyReport:
    checks: list[PropertyCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(check.ok for check in self.checks)

    @property
    def failures(self) -> list[PropertyCheck]:
        return [check for check in self.checks if not check.ok]

    def to_model(self) -> PropertyReportModel:
        return PropertyReportModel(
            ok=self.ok,
            checks=[PropertyCheckModel(**check.__dict__) for check in self.checks],
        )

    def raise_on_failure(self) -> None:
        if self.failures:
            first = self.failures[0]
            raise InvariantViolationError(
                f"{first.name}: {first.detail}（共 {len(self.failures)} 项失败）",
                invariant=first.invariant,
                module=first.module,
            )


def _perturb(factorization: Factorization) -> Factorization:
    b_matrix = np.array(factorization.b_matrix)
    b_matrix[0, 0] += 1e-3
    return Factorization(
        b_matrix=b_matrix,
        c_matrix=factorization.c_matrix,
        gamma=factorization.gamma,
        frob_sq_b=float(np.sum(b_matrix * b_matrix)),
        method_tag=factorization.method_tag,
    )


def _check(report: PropertyReport, name: str, module: str, invariant: str, body: Callable[[], tuple[bool, str]]) -> None:
    try:
        ok, detail = body()
    except ServiceError as exc:
        ok, detail = False, str(exc)
    report.checks.append(PropertyCheck(name=name, module=module, invariant=invariant, ok=ok, detail=detail))
    if not ok:
        logger.error("性质检查失败 [%s:%s] %s：%s", module, invariant, name, detail)


def _small_config(dataset: StreamDataset, *, eta: float, seed: int, mechanism: NoiseMechanism) -> SimConfig:
    return SimConfig(
        n=dataset.n,
        R=dataset.R,
        tau=dataset.tau,
        d=dataset.d,
        eta=eta,
        seed=seed,
        mechanism=mechanism,
        trials=1,
    )


def _sensitivity_pairs(seed: int, pairs: int) -> tuple[bool, str]:
    """随机构造邻接数据流：替换一个 D_i^{r,t}，在已发布模型处重算 G，检查只有第 r 行改变。"""
    rng = np.random.default_rng(derive_child_seed(seed, "sensitivity"))
    worst_ratio = 0.0
    for k in range(pairs):
        n, tau, R = (int(v) for v in (rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 21)))
        dataset = generate_synthetic(n, R, tau, 3, 0.1, 0.1, derive_child_seed(seed, f"pair-{k}"))
        method = FactorizationMethod.TRIVIAL_IDENTITY_C if k % 2 == 0 else FactorizationMethod.SQRT_NORMALIZED
        factorization = factorize(build_prefix_workload(R), method)
        config = _small_config(dataset, eta=0.1, seed=k, mechanism=NoiseMechanism.CORRELATED_MF)
        trace = run_simulation(config, dataset, factorization)

        i, r, t = int(rng.integers(n)), int(rng.integers(R)), int(rng.integers(tau))
        replacement = rng.standard_normal(3)
        replacement /= max(1.0, float(np.linalg.norm(replacement)))
        neighbor = dataset.replace_datum(i, r, t, ClientDatum(features=replacement, label=int(rng.choice([-1, 1]))))
        released = trace.released_models
        G = replay_gradient_stack(released, dataset, config)
        G_prime = replay_gradient_stack(released, neighbor, config)
        result = check_sensitivity(factorization.c_matrix, G, G_prime, config.clip_bound, factorization.gamma, changed_row=r)
        worst_ratio = max(worst_ratio, result.ratio)
        if not result.ok:
            return False, f"第 {k} 对：lhs={result.lhs:.6g} bound={result.bound:.6g} 改变的行 {result.changed_rows}"
    return True, f"{pairs} 对邻接数据全部满足，最大 lhs/bound = {worst_ratio:.3g}"


def run_property_suite(*, seed: int = 0, fault: Optional[str] = None, sensitivity_pairs: int = 50) -> PropertyReport:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"未知的故障注入：{fault}")
    report = PropertyReport()

    for R in (1, 2, 3, 16, 64):
        workload = build_prefix_workload(R)
        for method in (FactorizationMethod.SQRT_NORMALIZED, FactorizationMethod.OPTIMIZED):
            factorization = factorize(workload, method)
            if fault == FAULT_PERTURB_B:
                factorization = _perturb(factorization)

            def reconstruction(f: Factorization = factorization) -> tuple[bool, str]:
                error = f.reconstruction_error(workload)
                return error <= RECONSTRUCTION_TOL, f"‖A − BC‖/‖A‖ = {error:.3e}"

            def gamma(f: Factorization = factorization) -> tuple[bool, str]:
                return abs(f.gamma - 1.0) <= GAMMA_TOL, f"γ(C) = {f.gamma:.12g}"

            _check(report, f"reconstruction {method.value} R={R}", "workload_factorization", "reconstruction", reconstruction)
            _check(report, f"gamma {method.value} R={R}", "workload_factorization", "gamma_normalized", gamma)

    sqrt16 = factorize(build_prefix_workload(16), FactorizationMethod.SQRT_NORMALIZED)
    _check(
        report,
        "rescaling invariance",
        "workload_factorization",
        "rescale",
        lambda: (
            rescale_factorization(sqrt16, 3.0).reconstruction_error(build_prefix_workload(16)) <= RECONSTRUCTION_TOL,
            "(αB, C/α) 仍重构 A",
        ),
    )

    budget = PrivacyBudget(epsilon=5.0, delta=1e-3)
    _check(
        report,
        "calibration golden values",
        "privacy_accounting",
        "calibration",
        lambda: (
            abs(calibrate_correlated(budget, 1.0, 1.0).variance - 3.010482) <= 1e-5
            and abs(calibrate_independent_zcdp(budget, 1.0).variance - ZCDP_VARIANCE_EPS5) <= 1e-9
            and abs(calibrate_independent_zcdp(PrivacyBudget(epsilon=1.0, delta=1e-3), 1.0).variance - 59.194) <= 0.01,
            "V²(5, 1e−3) 与 ρ-zCDP 基线的闭式值",
        ),
    )

    dataset = generate_synthetic(10, 100, 4, 5, 0.1, 0.1, seed)
    factorization = factorize(build_prefix_workload(100), FactorizationMethod.SQRT_NORMALIZED)
    config = _small_config(dataset, eta=0.1, seed=seed, mechanism=NoiseMechanism.CORRELATED_MF)
    holder: dict[str, object] = {}

    def simulate() -> tuple[bool, str]:
        trace = run_simulation(config, dataset, factorization)
        holder["trace"] = trace
        residual = float(np.max(trace.virtual_residuals))
        return residual <= 1e-9, f"最大虚拟迭代残差 {residual:.3e}，最大漂移比 {trace.max_drift_ratio:.3g}"

    _check(report, "virtual iterate and drift bound", "ofl_simulator", "virtual_iterate", simulate)

    def stacked() -> tuple[bool, str]:
        trace = holder.get("trace")
        if trace is None:
            return False, "仿真未完成"
        residual = verify_stacked_form(trace, build_prefix_workload(100).entries, factorization.b_matrix)
        return residual <= STACKED_TOL, f"矩阵形式残差 {residual:.3e}"

    _check(report, "stacked form", "ofl_simulator", "stacked_form", stacked)

    def determinism() -> tuple[bool, str]:
        again = run_simulation(config, dataset, factorization)
        trace = holder.get("trace")
        same = trace is not None and np.array_equal(again.global_models, trace.global_models)
        return same, "同一 (config, seed) 两次运行逐位一致" if same else "两次运行结果不同"

    _check(report, "determinism", "ofl_simulator", "determinism", determinism)

    def noiseless_reduction() -> tuple[bool, str]:
        single = generate_synthetic(1, 30, 1, 5, 0.1, 0.1, seed)
        base = _small_config(single, eta=0.3, seed=seed, mechanism=NoiseMechanism.NONE)
        plain = run_simulation(base, single)
        x = np.zeros(5)
        for r in range(single.R):
            features, labels = single.round_slice(r)
            margin = labels[0, 0] * float(features[0, 0] @ x)
            x = x - 0.3 * (-labels[0, 0] * features[0, 0] / (1.0 + np.exp(margin)))
        gap = float(np.max(np.abs(plain.global_models[-1] - x)))
        return gap <= 1e-12, f"与在线梯度下降的最大差 {gap:.3e}"

    _check(report, "noiseless reduction", "ofl_simulator", "noiseless_reduction", noiseless_reduction)

    _check(
        report,
        "neighbor sensitivity",
        "privacy_accounting",
        "sensitivity_bound",
        lambda: _sensitivity_pairs(seed, sensitivity_pairs),
    )

    logger.info("性质检查：%d 项，失败 %d 项", len(report.checks), len(report.failures))
    return report


__all__ = ["FAULTS", "FAULT_PERTURB_B", "ZCDP_VARIANCE_EPS5", "PropertyCheck", "PropertyReport", "run_property_suite"]
