from __future__ import annotations


class ServiceError(Exception):
    """Base class that carries a default process exit code for CLI mapping."""

    default_exit_code = 1

    def __init__(self, message: str = "", *, exit_code: int | None = None) -> None:
        super().__init__(message)
        self.exit_code = exit_code if exit_code is not None else self.default_exit_code


class ConfigurationError(ServiceError):
    default_exit_code = 2


class InvalidDimensionError(ConfigurationError):
    default_exit_code = 2


class InvalidPrivacyParameterError(ConfigurationError):
    default_exit_code = 2


class MissingFactorizationError(ConfigurationError):
    default_exit_code = 2


class DimensionMismatchError(ConfigurationError):
    default_exit_code = 2


class ShapeMismatchError(ServiceError):
    default_exit_code = 1


class RoundIndexError(ServiceError):
    default_exit_code = 1


class MissingOracleError(ServiceError):
    default_exit_code = 1


class CacheFormatError(ServiceError):
    default_exit_code = 2


class InvariantViolationError(ServiceError):
    """某条不变量被违反；invariant / module 用于在报告中定位。"""

    default_exit_code = 1

    def __init__(self, message: str = "", *, invariant: str, module: str, exit_code: int | None = None) -> None:
        super().__init__(f"[{module}:{invariant}] {message}", exit_code=exit_code)
        self.invariant = invariant
        self.module = module


class InternalConsistencyError(InvariantViolationError):
    """实现内部恒等式（平均模型改写、虚拟迭代、漂移上界）失效，说明代码有 bug。"""

    default_exit_code = 1
