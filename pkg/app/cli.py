"""Command-line entry: `python main.py <subcommand> [options]`.

退出码：0 成功，1 不变量被违反，2 配置错误。
"""
from __future__ import annotations

import argparse
import json
import logging
import os
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from app.schemas.config import ExperimentConfig, ExperimentKind
from app.services.exceptions import ServiceError
from app.services.experiment_runner import (
    ExperimentOutcome,
    run_bnorm_experiment,
    run_budget_comparison,
    run_custom,
    run_impact_tau,
)
from app.services.property_suite import FAULTS, run_property_suite
from app.services.workload_factorization import (
    FactorizationMethod,
    build_prefix_workload,
    cache_directory_for,
    factorize,
    save_factorization,
)
from app.storage.constants import (
    DATA_CACHE_ENV_KEY,
    FACTORIZATION_CACHE_ENV_KEY,
    JOBS_ENV_KEY,
    LOG_LEVEL_ENV_KEY,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2

_COMMAND_KINDS = {
    "bnorm-study": ExperimentKind.BNORM_STUDY,
    "impact-tau": ExperimentKind.IMPACT_TAU,
    "budget-compare": ExperimentKind.BUDGET_COMPARISON,
    "simulate": ExperimentKind.CUSTOM,
}


def configure_logging(level: Optional[str] = None) -> None:
    resolved = (level or os.environ.get(LOG_LEVEL_ENV_KEY) or "INFO").upper()
    logging.basicConfig(level=resolved, format="[%(levelname)s] %(name)s: %(message)s", force=True)


def _sensitivity_reading(value: str) -> str | float:
    """`literal`、`averaged` 或正数缩放。"""
    if value in ("literal", "averaged"):
        return value
    try:
        scale = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"应为 literal、averaged 或正数，收到 {value!r}") from None
    if not scale > 0:
        raise argparse.ArgumentTypeError(f"缩放必须为正数，收到 {value!r}")
    return scale


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="实验配置 JSON 文件")
    parser.add_argument("--seed", type=int, default=None, help="主种子，覆盖配置文件")
    parser.add_argument("--jobs", type=int, default=None, help="并发试验数上限")
    parser.add_argument("--out", type=Path, default=None, help="输出目录")
    parser.add_argument("--trials", type=int, default=None, help="每条曲线的试验次数")
    parser.add_argument("--factorization-cache", type=Path, default=None, help="分解 CSV 缓存目录")
    parser.add_argument("--data-cache", type=Path, default=None, help="数据集 CSV 缓存目录")
    parser.add_argument(
        "--sensitivity-scale",
        type=_sensitivity_reading,
        metavar="{literal,averaged,SCALE}",
        default=None,
        help="逐行敏感度的缩放（覆盖配置中的 sensitivity_reading）",
    )
    parser.add_argument("--progress", action="store_true", help="显示 tqdm 进度条")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oflsim", description="差分隐私在线联邦学习仿真")
    parser.add_argument("--log-level", default=None, help="日志级别，默认读取 OFLSIM_LOG_LEVEL 或 INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    factorize_parser = sub.add_parser("factorize", help="计算前缀和工作负载的分解并导出 CSV 包")
    factorize_parser.add_argument("--R", dest="R", type=int, required=True, help="轮数 R")
    factorize_parser.add_argument(
        "--method",
        choices=[method.value for method in FactorizationMethod],
        default=FactorizationMethod.SQRT_NORMALIZED.value,
    )
    factorize_parser.add_argument("--out", type=Path, default=Path("factorizations"), help="缓存根目录")

    bnorm = sub.add_parser("bnorm-study", help="‖B‖²_F 随 R 的增长")
    _add_run_options(bnorm)
    bnorm.add_argument("--R-list", dest="R_list", type=int, nargs="*", default=None)
    bnorm.add_argument("--methods", nargs="*", choices=[method.value for method in FactorizationMethod], default=None)

    for name, help_text in (
        ("simulate", "按配置运行单一机制的重复试验"),
        ("impact-tau", "总数据量相同、不同 τ 的比较"),
        ("budget-compare", "两种隐私预算下相关噪声与独立噪声基线的比较"),
    ):
        _add_run_options(sub.add_parser(name, help=help_text))

    verify = sub.add_parser("verify", help="运行全部不变量检查")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--pairs", type=int, default=50, help="邻接数据对的数量")
    verify.add_argument("--fault", choices=list(FAULTS), default=None, help="注入故障以确认检查会失败")

    sub.add_parser("schema", help="输出实验配置的 JSON Schema")
    return parser


def load_experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """优先级：命令行参数 > 配置文件 > 环境变量 > 内置默认值。"""
    data: dict[str, Any] = {}
    if args.config is not None:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("配置文件顶层必须是 JSON 对象")
    data["experiment"] = _COMMAND_KINDS[args.command].value

    env_defaults = {
        "jobs": os.environ.get(JOBS_ENV_KEY),
        "factorization_cache": os.environ.get(FACTORIZATION_CACHE_ENV_KEY),
        "data_cache": os.environ.get(DATA_CACHE_ENV_KEY),
    }
    for key, value in env_defaults.items():
        if value and key not in data:
            data[key] = value

    if args.command == "simulate" and "sensitivity_reading" not in data:
        data["sensitivity_reading"] = "literal"
    if args.seed is not None:
        data["sim"] = {**data.get("sim", {}), "seed": args.seed}
    overrides = {
        "jobs": args.jobs,
        "output_dir": args.out,
        "trials": args.trials,
        "factorization_cache": args.factorization_cache,
        "data_cache": args.data_cache,
        "sensitivity_reading": args.sensitivity_scale,
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = str(value) if isinstance(value, Path) else value
    if args.progress:
        data["show_progress"] = True
    if args.command == "bnorm-study":
        if args.R_list is not None:
            data["R_list"] = args.R_list
        if args.methods is not None:
            data["methods"] = args.methods
    return ExperimentConfig.model_validate(data)


def _report_outcome(outcome: ExperimentOutcome) -> None:
    for method, row in outcome.bnorm_rows:
        print(f"R={row.R:<5d} {method.value:<20s} ‖B‖²_F={row.frob_sq_b:.6g}  ratio={row.ratio:.6g}")
    for curve in outcome.curves:
        print(f"{curve.label:<36s} 最终损失误差 {curve.final_mean:.6g} ± {curve.final_std:.6g}（{len(curve.trials)} 次试验）")
    print(f"完成。输出目录: {outcome.output_dir}")


def _run_factorize(args: argparse.Namespace) -> int:
    factorization = factorize(build_prefix_workload(args.R), args.method)
    target = save_factorization(factorization, cache_directory_for(args.out, args.R, args.method))
    print(
        f"完成。R={args.R}, 方法 {args.method}, γ={factorization.gamma:.12g}, "
        f"‖B‖²_F={factorization.frob_sq_b:.6g}, 输出 {target}"
    )
    return EXIT_OK


def _run_verify(args: argparse.Namespace) -> int:
    report = run_property_suite(seed=args.seed, fault=args.fault, sensitivity_pairs=args.pairs)
    print(report.to_model().model_dump_json(indent=2))
    if not report.ok:
        for failure in report.failures:
            logger.error("[%s:%s] %s", failure.module, failure.invariant, failure.name)
        return EXIT_INVARIANT
    return EXIT_OK


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "schema":
        print(json.dumps(ExperimentConfig.model_json_schema(), indent=2, ensure_ascii=False))
        return EXIT_OK
    if args.command == "factorize":
        return _run_factorize(args)
    if args.command == "verify":
        return _run_verify(args)

    config = load_experiment_config(args)
    runners = {
        "bnorm-study": run_bnorm_experiment,
        "simulate": run_custom,
        "impact-tau": run_impact_tau,
        "budget-compare": run_budget_comparison,
    }
    _report_outcome(runners[args.command](config))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return _dispatch(args)
    except ValidationError as exc:
        logger.error("配置校验失败：\n%s", exc)
        return EXIT_CONFIG
    except (json.JSONDecodeError, ValueError, OSError) as exc:
        logger.error("无法读取配置：%s", exc)
        return EXIT_CONFIG
    except ServiceError as exc:
        logger.error("%s", exc)
        return exc.exit_code


__all__ = ["EXIT_CONFIG", "EXIT_INVARIANT", "EXIT_OK", "build_parser", "load_experiment_config", "main"]
