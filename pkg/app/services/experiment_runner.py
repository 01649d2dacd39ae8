"""Experiment orchestration: B-norm study, impact of τ, budget comparison, custom runs.

所有试验共享同一份由主种子生成的数据集，只在噪声种子上不同；
试验可并发执行，但聚合前一律按试验序号排序，保证 CSV 字节级可复现。
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from tqdm.auto import tqdm

from app.schemas.config import (
    ExperimentConfig,
    ExperimentKind,
    NoiseMechanism,
    PrivacyBudget,
    SimConfig,
    SimSettings,
)
from app.schemas.results import (
    BaselineGridScore,
    CalibrationModel,
    CurveMetadata,
    OracleModel,
    RunMetadata,
)
from app.services.data_stream import (
    StreamDataset,
    get_or_generate_dataset,
    regroup_rounds,
    smoothness_estimate,
)
from app.services.exceptions import ConfigurationError
from app.services.metrics_regret import (
    OracleSolution,
    build_regret_report,
    export_regret_csv,
    loss_error_series,
    smoothness_diagnostic,
    solve_global_oracle,
)
from app.services.ofl_simulator import default_local_step, export_trace_csv, run_simulation
from app.services.privacy_accounting import (
    NoiseCalibration,
    derive_child_seed,
    resolve_sensitivity_scale,
)
from app.services.trial_progress import TrialProgress, get_trial_progress
from app.services.workload_factorization import (
    BNormRow,
    Factorization,
    FactorizationMethod,
    bnorm_study,
    get_or_build_factorization,
)
from app.storage.constants import (
    BNORM_FILE,
    CSV_SCHEMA_VERSION,
    METADATA_FILE,
    RESOLVED_CONFIG_FILE,
    TRACE_MODELS_FILE,
)
from app.storage.csv_store import write_versioned_csv

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrialResult:
    trial: int
    seed: int
    loss_errors: np.ndarray
    max_virtual_residual: float
    max_drift_ratio: float


@dataclass(frozen=True)
class AggregateResult:
    label: str
    mean: np.ndarray
    std: np.ndarray
    trials: tuple[TrialResult, ...]
    config: SimConfig
    calibration: NoiseCalibration
    factorization: Optional[Factorization] = None

    @property
    def R(self) -> int:
        return int(self.mean.shape[0])

    @property
    def final_mean(self) -> float:
        return float(self.mean[-1])

    @property
    def final_std(self) -> float:
        return float(self.std[-1])

    @property
    def file_name(self) -> str:
        return f"curve_{self.label}.csv"


@dataclass
class ExperimentOutcome:
    experiment: ExperimentKind
    output_dir: Path
    curves: list[AggregateResult] = field(default_factory=list)
    bnorm_rows: list[tuple[FactorizationMethod, BNormRow]] = field(default_factory=list)
    metadata: Optional[RunMetadata] = None

    def curve(self, label: str) -> AggregateResult:
        for curve in self.curves:
            if curve.label == label:
                return curve
        raise KeyError(label)


def trial_seeds(master_seed: int, label: str, trials: int) -> list[int]:
    return [derive_child_seed(master_seed, f"{label}/trial-{k}") for k in range(trials)]


def aggregate_trials(
    label: str,
    results: Iterable[TrialResult],
    config: SimConfig,
    calibration: NoiseCalibration,
    factorization: Optional[Factorization] = None,
) -> AggregateResult:
    ordered = tuple(sorted(results, key=lambda item: item.trial))
    if not ordered:
        raise ConfigurationError("至少需要一次试验才能聚合")
    stack = np.vstack([item.loss_errors for item in ordered])
    mean = np.mean(stack, axis=0)
    # 误差棒为样本标准差（n−1）；单次试验时为 0
    std = np.std(stack, axis=0, ddof=1) if len(ordered) > 1 else np.zeros_like(mean)
    return AggregateResult(
        label=label,
        mean=mean,
        std=std,
        trials=ordered,
        config=config,
        calibration=calibration,
        factorization=factorization,
    )


def run_trials(
    config: SimConfig,
    dataset: StreamDataset,
    oracle_global: OracleSolution,
    *,
    label: str,
    master_seed: int,
    factorization: Optional[Factorization] = None,
    jobs: int = 1,
    show_progress: bool = False,
    progress: Optional[TrialProgress] = None,
) -> AggregateResult:
    seeds = trial_seeds(master_seed, label, config.trials)
    if progress is not None:
        progress.begin_curve(label, config.trials)

    def run_one(k: int) -> tuple[TrialResult, NoiseCalibration]:
        trace = run_simulation(config.with_updates(seed=seeds[k]), dataset, factorization)
        result = TrialResult(
            trial=k,
            seed=seeds[k],
            loss_errors=loss_error_series(trace, dataset, oracle_global),
            max_virtual_residual=float(np.max(trace.virtual_residuals)),
            max_drift_ratio=trace.max_drift_ratio,
        )
        if progress is not None:
            progress.tick(label)
        return result, trace.calibration

    outputs: list[tuple[TrialResult, NoiseCalibration]] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        futures = [executor.submit(run_one, k) for k in range(config.trials)]
        for future in tqdm(as_completed(futures), total=len(futures), desc=label, disable=not show_progress):
            outputs.append(future.result())

    aggregate = aggregate_trials(label, [item[0] for item in outputs], config, outputs[0][1], factorization)
    logger.info("%s：%d 次试验，最终损失误差 %.6g ± %.6g", label, config.trials, aggregate.final_mean, aggregate.final_std)
    if progress is not None:
        logger.info("[%s] 进度 %s", label, progress.snapshot().describe())
    return aggregate


# ----------------------------------------------------------------------
# 输出
# ----------------------------------------------------------------------


def write_curve_csv(aggregate: AggregateResult, directory: Path) -> Path:
    rows = ([r, aggregate.mean[r], aggregate.std[r]] for r in range(aggregate.R))
    return write_versioned_csv(
        Path(directory) / aggregate.file_name,
        ["round", "mean", "std"],
        rows,
        comments={
            "label": aggregate.label,
            "mechanism": aggregate.config.mechanism.value,
            "trials": len(aggregate.trials),
            "tau": aggregate.config.tau,
            "R": aggregate.config.R,
            "variance": aggregate.calibration.variance,
        },
    )


def _calibration_model(calibration: NoiseCalibration) -> CalibrationModel:
    return CalibrationModel.model_validate(calibration.as_metadata())


def _oracle_model(oracle: OracleSolution) -> OracleModel:
    return OracleModel(
        min_value=oracle.min_value,
        grad_norm_at_min=oracle.grad_norm_at_min,
        iterations=oracle.iterations,
        converged=oracle.converged,
        ridge=oracle.ridge,
        method=oracle.method.value,
        separable=oracle.separable,
    )


def _curve_metadata(
    aggregate: AggregateResult,
    sensitivity_reading: object,
    baseline_grid: Sequence[BaselineGridScore] = (),
) -> CurveMetadata:
    config = aggregate.config
    factorization = aggregate.factorization
    return CurveMetadata(
        label=aggregate.label,
        file=aggregate.file_name,
        mechanism=config.mechanism.value,
        budget=config.budget,
        n=config.n,
        R=config.R,
        tau=config.tau,
        d=config.d,
        eta=config.eta,
        eta_g=config.eta_g,
        eta_tilde=config.eta_tilde,
        baseline_eta=config.baseline_eta if config.mechanism is NoiseMechanism.INDEPENDENT_ZCDP else None,
        step_schedule=config.step_schedule.value,
        factorization_method=factorization.method_tag.value if factorization is not None else None,
        frob_sq_b=factorization.frob_sq_b if factorization is not None else None,
        sensitivity_reading=str(sensitivity_reading),
        calibration=_calibration_model(aggregate.calibration),
        trial_seeds=[item.seed for item in aggregate.trials],
        final_mean=aggregate.final_mean,
        final_std=aggregate.final_std,
        max_virtual_residual=max(item.max_virtual_residual for item in aggregate.trials),
        max_drift_ratio=max(item.max_drift_ratio for item in aggregate.trials),
        baseline_grid=list(baseline_grid),
    )


def write_run_files(config: ExperimentConfig, metadata: RunMetadata) -> None:
    """每个输出目录都保存完整解析后的配置与实际使用的标定。"""
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / RESOLVED_CONFIG_FILE).write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    (output_dir / METADATA_FILE).write_text(metadata.model_dump_json(indent=2) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# 公共准备步骤
# ----------------------------------------------------------------------


def _dataset_for(config: ExperimentConfig, R: int, tau: int) -> StreamDataset:
    settings = config.sim
    return get_or_generate_dataset(
        settings.n,
        R,
        tau,
        settings.d,
        config.data.alpha,
        config.data.beta,
        settings.seed,
        normalize=config.data.normalize_features,
        stationary=config.data.stationary,
        cache_dir=config.data_cache,
    )


def resolve_local_step(settings: SimSettings, smoothness: float, tau_max: int) -> float:
    """η 在所有 τ 设置间保持不变；未给出时取 step_scale/(L̂·η_g·τ_max)。"""
    if settings.eta is not None:
        return settings.eta
    return default_local_step(smoothness, tau_max, eta_g=settings.eta_g, step_scale=settings.step_scale)


def _sim_config(
    config: ExperimentConfig,
    *,
    R: int,
    tau: int,
    eta: float,
    smoothness: float,
    mechanism: NoiseMechanism,
    budget: PrivacyBudget,
    baseline_eta: Optional[float] = None,
) -> SimConfig:
    settings = config.sim
    return SimConfig(
        n=settings.n,
        R=R,
        tau=tau,
        d=settings.d,
        eta=eta,
        eta_g=settings.eta_g,
        clip_bound=settings.clip_bound,
        smoothness_estimate=smoothness,
        seed=settings.seed,
        budget=budget,
        mechanism=mechanism,
        trials=config.trials,
        sensitivity_scale=resolve_sensitivity_scale(config.sensitivity_reading, mechanism, n=settings.n, tau=tau),
        step_schedule=settings.step_schedule,
        baseline_eta=baseline_eta,
        factorization_method=settings.factorization_method,
    )


def _factorization_for(config: ExperimentConfig, mechanism: NoiseMechanism, R: int) -> Optional[Factorization]:
    if mechanism is not NoiseMechanism.CORRELATED_MF:
        return None
    return get_or_build_factorization(R, config.sim.factorization_method, cache_dir=config.factorization_cache)


def _budget_label(budget: PrivacyBudget) -> str:
    return f"eps{budget.epsilon:g}_delta{budget.delta:g}"


def _finish(
    config: ExperimentConfig,
    outcome: ExperimentOutcome,
    *,
    smoothness: Optional[float],
    oracle: Optional[OracleSolution],
    curve_metadata: list[CurveMetadata],
    extra_files: Sequence[str] = (),
    smoothness_violations: Optional[int] = None,
) -> ExperimentOutcome:
    files = [curve.file_name for curve in outcome.curves] + list(extra_files)
    for curve in outcome.curves:
        write_curve_csv(curve, outcome.output_dir)
    outcome.metadata = RunMetadata(
        schema_version=CSV_SCHEMA_VERSION,
        experiment=outcome.experiment.value,
        master_seed=config.sim.seed,
        data=config.data,
        smoothness_estimate=smoothness,
        smoothness_violations=smoothness_violations,
        oracle=_oracle_model(oracle) if oracle is not None else None,
        curves=curve_metadata,
        files=files,
    )
    write_run_files(config, outcome.metadata)
    return outcome


# ----------------------------------------------------------------------
# 实验
# ----------------------------------------------------------------------


def run_bnorm_study(
    R_list: Sequence[int],
    methods: Sequence[FactorizationMethod | str],
    output_dir: Optional[Path] = None,
) -> list[tuple[FactorizationMethod, BNormRow]]:
    rows: list[tuple[FactorizationMethod, BNormRow]] = []
    for method in methods:
        method = FactorizationMethod(method)
        rows.extend((method, row) for row in bnorm_study(R_list, method))
    if output_dir is not None:
        write_versioned_csv(
            Path(output_dir) / BNORM_FILE,
            ["R", "method", "frob_sq_b", "ratio"],
            ([row.R, method.value, row.frob_sq_b, row.ratio] for method, row in rows),
        )
    return rows


def run_bnorm_experiment(config: ExperimentConfig) -> ExperimentOutcome:
    outcome = ExperimentOutcome(experiment=ExperimentKind.BNORM_STUDY, output_dir=Path(config.output_dir))
    outcome.bnorm_rows = run_bnorm_study(config.R_list, config.methods, outcome.output_dir)
    return _finish(config, outcome, smoothness=None, oracle=None, curve_metadata=[], extra_files=[BNORM_FILE])


def run_impact_tau(config: ExperimentConfig, *, progress: Optional[TrialProgress] = None) -> ExperimentOutcome:
    """同样的总数据量 τ·R 下比较不同 τ；η、η_g 在所有设置间相同。"""
    totals = {item.tau * item.R for item in config.tau_rounds}
    if len(totals) != 1:
        raise ConfigurationError(f"impact_tau 要求各组 tau·R 相同，当前为 {sorted(totals)}")
    progress = progress or get_trial_progress()
    settings = config.sim
    mechanism = settings.mechanism
    total = totals.pop()

    # 以 τ=1 生成到达序列，再按各 τ 重新分轮，保证每组看到完全相同的数据
    base = _dataset_for(config, total, 1)
    smoothness = smoothness_estimate(base)
    eta = resolve_local_step(settings, smoothness, max(item.tau for item in config.tau_rounds))
    oracle = solve_global_oracle(base)
    outcome = ExperimentOutcome(experiment=ExperimentKind.IMPACT_TAU, output_dir=Path(config.output_dir))
    progress.start(experiment=outcome.experiment.value, total_trials=len(config.tau_rounds) * config.trials)

    metadata: list[CurveMetadata] = []
    try:
        for item in config.tau_rounds:
            dataset = regroup_rounds(base, item.tau)
            sim_config = _sim_config(
                config,
                R=item.R,
                tau=item.tau,
                eta=eta,
                smoothness=smoothness,
                mechanism=mechanism,
                budget=settings.budget,
            )
            aggregate = run_trials(
                sim_config,
                dataset,
                oracle,
                label=f"tau{item.tau}_R{item.R}",
                master_seed=settings.seed,
                factorization=_factorization_for(config, mechanism, item.R),
                jobs=config.jobs,
                show_progress=config.show_progress,
                progress=progress,
            )
            outcome.curves.append(aggregate)
            metadata.append(_curve_metadata(aggregate, config.sensitivity_reading))
    except Exception as exc:
        progress.fail(str(exc))
        raise
    progress.set_aggregating()
    _finish(config, outcome, smoothness=smoothness, oracle=oracle, curve_metadata=metadata)
    progress.done(f"{len(outcome.curves)} 条曲线")
    return outcome


def run_budget_comparison(config: ExperimentConfig, *, progress: Optional[TrialProgress] = None) -> ExperimentOutcome:
    """每个预算下：相关噪声一条曲线；独立噪声基线在步长网格上取最终均值最小的一条。"""
    progress = progress or get_trial_progress()
    settings = config.sim
    dataset = _dataset_for(config, settings.R, settings.tau)
    smoothness = smoothness_estimate(dataset)
    eta = resolve_local_step(settings, smoothness, settings.tau)
    oracle = solve_global_oracle(dataset)
    factorization = _factorization_for(config, NoiseMechanism.CORRELATED_MF, settings.R)
    outcome = ExperimentOutcome(experiment=ExperimentKind.BUDGET_COMPARISON, output_dir=Path(config.output_dir))
    progress.start(
        experiment=outcome.experiment.value,
        total_trials=len(config.budgets) * (1 + len(config.baseline_step_grid)) * config.trials,
    )

    metadata: list[CurveMetadata] = []
    try:
        for budget in config.budgets:
            suffix = _budget_label(budget)
            correlated_config = _sim_config(
                config,
                R=settings.R,
                tau=settings.tau,
                eta=eta,
                smoothness=smoothness,
                mechanism=NoiseMechanism.CORRELATED_MF,
                budget=budget,
            )
            correlated = run_trials(
                correlated_config,
                dataset,
                oracle,
                label=f"correlated_{suffix}",
                master_seed=settings.seed,
                factorization=factorization,
                jobs=config.jobs,
                show_progress=config.show_progress,
                progress=progress,
            )
            outcome.curves.append(correlated)
            metadata.append(_curve_metadata(correlated, config.sensitivity_reading))

            matched_eta = correlated_config.eta_tilde / settings.tau
            candidates: list[tuple[float, AggregateResult]] = []
            for factor in config.baseline_step_grid:
                baseline_config = _sim_config(
                    config,
                    R=settings.R,
                    tau=settings.tau,
                    eta=eta,
                    smoothness=smoothness,
                    mechanism=NoiseMechanism.INDEPENDENT_ZCDP,
                    budget=budget,
                    baseline_eta=factor * matched_eta,
                )
                candidates.append(
                    (
                        factor,
                        run_trials(
                            baseline_config,
                            dataset,
                            oracle,
                            label=f"independent_{suffix}_x{factor:g}",
                            master_seed=settings.seed,
                            jobs=config.jobs,
                            show_progress=config.show_progress,
                            progress=progress,
                        ),
                    )
                )
            best_factor, best = min(candidates, key=lambda item: item[1].final_mean)
            grid = [
                BaselineGridScore(
                    factor=factor,
                    baseline_eta=candidate.config.baseline_eta,
                    final_mean=candidate.final_mean,
                    final_std=candidate.final_std,
                    selected=factor == best_factor,
                )
                for factor, candidate in candidates
            ]
            logger.info("%s 基线选用步长倍数 %g（η=%.6g）", suffix, best_factor, best.config.baseline_eta)
            selected = replace(best, label=f"independent_{suffix}")
            outcome.curves.append(selected)
            metadata.append(_curve_metadata(selected, config.sensitivity_reading, grid))
    except Exception as exc:
        progress.fail(str(exc))
        raise
    progress.set_aggregating()
    _finish(config, outcome, smoothness=smoothness, oracle=oracle, curve_metadata=metadata)
    progress.done(f"{len(outcome.curves)} 条曲线")
    return outcome


def run_custom(config: ExperimentConfig, *, progress: Optional[TrialProgress] = None) -> ExperimentOutcome:
    """单一机制的重复试验，另外导出第 0 次试验的轨迹与遗憾报告。"""
    progress = progress or get_trial_progress()
    settings = config.sim
    dataset = _dataset_for(config, settings.R, settings.tau)
    smoothness = smoothness_estimate(dataset)
    eta = resolve_local_step(settings, smoothness, settings.tau)
    oracle = solve_global_oracle(dataset)
    sim_config = _sim_config(
        config,
        R=settings.R,
        tau=settings.tau,
        eta=eta,
        smoothness=smoothness,
        mechanism=settings.mechanism,
        budget=settings.budget,
    )
    factorization = _factorization_for(config, settings.mechanism, settings.R)
    outcome = ExperimentOutcome(experiment=ExperimentKind.CUSTOM, output_dir=Path(config.output_dir))
    progress.start(experiment=outcome.experiment.value, total_trials=config.trials)
    try:
        aggregate = run_trials(
            sim_config,
            dataset,
            oracle,
            label=settings.mechanism.value,
            master_seed=settings.seed,
            factorization=factorization,
            jobs=config.jobs,
            show_progress=config.show_progress,
            progress=progress,
        )
        outcome.curves.append(aggregate)
        trace = run_simulation(sim_config.with_updates(seed=aggregate.trials[0].seed), dataset, factorization)
        trace_path = export_trace_csv(trace, outcome.output_dir, include_models=config.export_models)
        report = build_regret_report(trace, dataset, oracle_global=oracle)
        regret_path = export_regret_csv(report, outcome.output_dir)
        # 首末两轮抽查 L̂ 是否满足梯度范数不等式
        diagnostics = [
            smoothness_diagnostic(dataset, r, report.oracle_per_round[r], smoothness, seed=settings.seed)
            for r in sorted({0, settings.R - 1})
        ]
    except Exception as exc:
        progress.fail(str(exc))
        raise
    progress.set_aggregating()
    extra = [trace_path.name, regret_path.name]
    if config.export_models:
        extra.append(TRACE_MODELS_FILE)
    _finish(
        config,
        outcome,
        smoothness=smoothness,
        oracle=oracle,
        curve_metadata=[_curve_metadata(aggregate, config.sensitivity_reading)],
        extra_files=extra,
        smoothness_violations=sum(item.violations for item in diagnostics),
    )
    progress.done(f"动态遗憾 {report.dynamic_regret:.6g}，静态遗憾 {report.static_regret:.6g}")
    return outcome


def run_experiment(config: ExperimentConfig) -> ExperimentOutcome:
    if config.experiment is ExperimentKind.BNORM_STUDY:
        return run_bnorm_experiment(config)
    if config.experiment is ExperimentKind.IMPACT_TAU:
        return run_impact_tau(config)
    if config.experiment is ExperimentKind.BUDGET_COMPARISON:
        return run_budget_comparison(config)
    return run_custom(config)


__all__ = [
    "AggregateResult",
    "ExperimentOutcome",
    "TrialResult",
    "aggregate_trials",
    "resolve_local_step",
    "run_bnorm_experiment",
    "run_bnorm_study",
    "run_budget_comparison",
    "run_custom",
    "run_experiment",
    "run_impact_tau",
    "run_trials",
    "trial_seeds",
    "write_curve_csv",
    "write_run_files",
]
