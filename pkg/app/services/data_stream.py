"""Synthetic heterogeneous logistic-regression streams and the per-client loss/gradient.

数据按 (learner i, round r, step t) 排布：第 i 个学习器的第 r·τ + t 个到达客户端提供一条数据。
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from app.services.exceptions import (
    CacheFormatError,
    InvalidDimensionError,
    RoundIndexError,
    ShapeMismatchError,
)
from app.storage.csv_store import format_cell, read_versioned_csv, write_versioned_csv

logger = logging.getLogger(__name__)

FEATURE_DECAY = 1.2


@dataclass(frozen=True)
class ClientDatum:
    features: np.ndarray
    label: int

    def __post_init__(self) -> None:
        if self.label not in (-1, 1):
            raise ShapeMismatchError(f"标签必须是 ±1，当前为 {self.label}")
        if not np.all(np.isfinite(self.features)):
            raise ShapeMismatchError("特征必须全部有限")


@dataclass(frozen=True)
class GenerationParams:
    alpha: float
    beta: float
    seed: int
    normalize: bool = True
    stationary: bool = False


@dataclass(frozen=True)
class LearnerParams:
    """生成时每个学习器的先验抽样结果：u_i, c_i, w_i, v_i。"""

    weight_means: np.ndarray
    feature_offsets: np.ndarray
    weights: np.ndarray
    feature_means: np.ndarray


@dataclass(frozen=True)
class StreamDataset:
    features: np.ndarray  # (n, R, τ, d)
    labels: np.ndarray  # (n, R, τ)，取值 ±1
    gen_params: Optional[GenerationParams] = None
    learner_params: Optional[LearnerParams] = None
    feature_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.features.ndim != 4:
            raise ShapeMismatchError(f"features 应为 (n, R, τ, d)，当前形状 {self.features.shape}")
        if self.labels.shape != self.features.shape[:3]:
            raise ShapeMismatchError(f"labels 形状 {self.labels.shape} 与 features {self.features.shape} 不一致")
        if min(self.features.shape) < 1:
            raise InvalidDimensionError(f"数据集各维度必须 ≥ 1，当前形状 {self.features.shape}")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def R(self) -> int:
        return int(self.features.shape[1])

    @property
    def tau(self) -> int:
        return int(self.features.shape[2])

    @property
    def d(self) -> int:
        return int(self.features.shape[3])

    @property
    def size(self) -> int:
        return self.n * self.R * self.tau

    def _check_round(self, r: int) -> None:
        if not 0 <= r < self.R:
            raise RoundIndexError(f"轮次 {r} 超出范围 [0, {self.R})")

    def datum(self, i: int, r: int, t: int) -> ClientDatum:
        self._check_round(r)
        if not (0 <= i < self.n and 0 <= t < self.tau):
            raise RoundIndexError(f"下标 (i={i}, t={t}) 超出范围 n={self.n}, τ={self.tau}")
        return ClientDatum(features=self.features[i, r, t].copy(), label=int(self.labels[i, r, t]))

    def round_slice(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        """第 r 轮全部学习器的数据：features (n, τ, d), labels (n, τ)。"""
        self._check_round(r)
        return self.features[:, r], self.labels[:, r]

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features.reshape(-1, self.d), self.labels.reshape(-1)

    def replace_datum(self, i: int, r: int, t: int, datum: ClientDatum) -> "StreamDataset":
        """返回只在 (i, r, t) 处不同的邻接数据集。"""
        self.datum(i, r, t)
        if datum.features.shape != (self.d,):
            raise ShapeMismatchError(f"替换数据的维度 {datum.features.shape} 与 d={self.d} 不一致")
        features = np.array(self.features)
        labels = np.array(self.labels)
        features[i, r, t] = datum.features
        labels[i, r, t] = datum.label
        return _freeze(replace(self, features=features, labels=labels, gen_params=None))


def regroup_rounds(dataset: StreamDataset, tau: int) -> StreamDataset:
    """把每个学习器的到达序列按新的 τ 重新分轮；总数据量 R·τ 不变，顺序不变。"""
    total = dataset.R * dataset.tau
    if tau < 1 or total % tau != 0:
        raise InvalidDimensionError(f"总步数 {total} 不能按 τ={tau} 均分")
    features = dataset.features.reshape(dataset.n, total // tau, tau, dataset.d)
    labels = dataset.labels.reshape(dataset.n, total // tau, tau)
    return _freeze(replace(dataset, features=features, labels=labels))


def _freeze(dataset: StreamDataset) -> StreamDataset:
    dataset.features.setflags(write=False)
    dataset.labels.setflags(write=False)
    return dataset


def feature_covariance_diagonal(d: int) -> np.ndarray:
    return np.arange(1, d + 1, dtype=float) ** (-FEATURE_DECAY)


def generate_synthetic(
    n: int,
    R: int,
    tau: int,
    d: int,
    alpha: float,
    beta: float,
    seed: int,
    *,
    normalize: bool = True,
    stationary: bool = False,
) -> StreamDataset:
    """按 (α, β) 控制异质性的合成 logistic 数据。

    每个学习器使用 SeedSequence(seed).spawn(n) 中自己的子流，抽取顺序固定：
    u_i, c_i, w_i, v_i, 特征噪声, 标签均匀数。stationary=True 时只抽一轮模板并在各轮重复。
    """
    for name, value in (("n", n), ("R", R), ("tau", tau), ("d", d)):
        if int(value) != value or value < 1:
            raise InvalidDimensionError(f"{name} 必须是正整数，当前为 {value}")
    if alpha < 0 or beta < 0:
        raise InvalidDimensionError(f"alpha/beta 必须 ≥ 0，当前为 ({alpha}, {beta})")

    covariance_sqrt = np.sqrt(feature_covariance_diagonal(d))
    slots = 1 if stationary else R
    features = np.empty((n, slots, tau, d))
    labels = np.empty((n, slots, tau), dtype=np.int8)
    weight_means = np.empty(n)
    feature_offsets = np.empty(n)
    weights = np.empty((n, d))
    feature_means = np.empty((n, d))

    for i, child in enumerate(np.random.SeedSequence(int(seed)).spawn(n)):
        rng = np.random.default_rng(child)
        weight_means[i] = alpha * rng.standard_normal()
        feature_offsets[i] = beta * rng.standard_normal()
        weights[i] = weight_means[i] + rng.standard_normal(d)
        feature_means[i] = feature_offsets[i] + rng.standard_normal(d)
        features[i] = feature_means[i] + rng.standard_normal((slots, tau, d)) * covariance_sqrt
        # 按学习器自己的 logistic 模型抽样标签，避免阈值化造成线性可分
        probabilities = expit(features[i] @ weights[i])
        labels[i] = np.where(rng.random((slots, tau)) < probabilities, 1, -1)

    if stationary:
        features = np.repeat(features, R, axis=1)
        labels = np.repeat(labels, R, axis=1)

    feature_scale = 1.0
    if normalize:
        max_norm = float(np.max(np.linalg.norm(features, axis=-1)))
        if max_norm > 1.0:
            feature_scale = 1.0 / max_norm
            features = features * feature_scale

    dataset = StreamDataset(
        features=features,
        labels=labels,
        gen_params=GenerationParams(alpha=float(alpha), beta=float(beta), seed=int(seed), normalize=normalize, stationary=stationary),
        learner_params=LearnerParams(
            weight_means=weight_means,
            feature_offsets=feature_offsets,
            weights=weights,
            feature_means=feature_means,
        ),
        feature_scale=feature_scale,
    )
    logger.debug("生成合成数据 n=%d R=%d τ=%d d=%d (α=%.3g, β=%.3g, seed=%d)", n, R, tau, d, alpha, beta, seed)
    return _freeze(dataset)


# ----------------------------------------------------------------------
# 损失与梯度
# ----------------------------------------------------------------------


def logistic_loss(x: np.ndarray, datum: ClientDatum) -> float:
    """log(1 + exp(−b⟨x, a⟩))，用 −log_expit 保证大 |⟨x,a⟩| 时数值稳定。"""
    return float(-log_expit(datum.label * float(np.dot(x, datum.features))))


def logistic_gradient(x: np.ndarray, datum: ClientDatum) -> np.ndarray:
    margin = datum.label * float(np.dot(x, datum.features))
    return -datum.label * datum.features * expit(-margin)


def clip_gradient(gradient: np.ndarray, clip_bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(gradient))
    if norm <= clip_bound:
        return gradient
    return gradient * (clip_bound / norm)


def logistic_gradient_clipped(x: np.ndarray, datum: ClientDatum, clip_bound: float) -> np.ndarray:
    if clip_bound <= 0:
        raise InvalidDimensionError(f"clip_bound 必须为正，当前为 {clip_bound}")
    return clip_gradient(logistic_gradient(x, datum), clip_bound)


def batch_losses(x: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """x 可以是单个模型 (d,) 或与 features 前缀形状一致的一组模型。"""
    margins = labels * np.sum(np.asarray(x) * features, axis=-1)
    return -log_expit(margins)


def batch_gradients_clipped(
    models: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    clip_bound: float,
) -> np.ndarray:
    """逐行计算裁剪后的梯度；models 与 features 按最后一维以外的形状广播。"""
    margins = labels * np.sum(models * features, axis=-1)
    gradients = (-labels * expit(-margins))[..., None] * features
    norms = np.linalg.norm(gradients, axis=-1, keepdims=True)
    scale = np.minimum(1.0, np.divide(clip_bound, norms, out=np.ones_like(norms), where=norms > 0))
    return gradients * scale


def round_losses(x: np.ndarray, dataset: StreamDataset, r: int) -> tuple[np.ndarray, float]:
    """第 r 轮 nτ 个损失 (n, τ) 以及它们的均值 f^r(x)。"""
    features, labels = dataset.round_slice(r)
    losses = batch_losses(x, features, labels)
    return losses, float(np.mean(losses))


def smoothness_estimate(dataset: StreamDataset) -> float:
    """L̂ = max ‖a‖² / 4（logistic 损失的 Hessian 上界）。"""
    return float(np.max(np.sum(dataset.features * dataset.features, axis=-1))) / 4.0


# ----------------------------------------------------------------------
# CSV 导入导出
# ----------------------------------------------------------------------


def export_dataset_csv(dataset: StreamDataset, path: Path) -> Path:
    comments: dict[str, object] = {"n": dataset.n, "R": dataset.R, "tau": dataset.tau, "d": dataset.d}
    if dataset.gen_params is not None:
        comments.update(
            alpha=dataset.gen_params.alpha,
            beta=dataset.gen_params.beta,
            seed=dataset.gen_params.seed,
            normalize=dataset.gen_params.normalize,
            stationary=dataset.gen_params.stationary,
        )
    comments["feature_scale"] = dataset.feature_scale
    header = ["learner", "round", "step", "label", *[f"f_{j + 1}" for j in range(dataset.d)]]

    def rows():
        for i in range(dataset.n):
            for r in range(dataset.R):
                for t in range(dataset.tau):
                    yield [i, r, t, int(dataset.labels[i, r, t]), *dataset.features[i, r, t].tolist()]

    return write_versioned_csv(path, header, rows(), comments=comments)


def load_dataset_csv(path: Path) -> StreamDataset:
    comments, header, rows = read_versioned_csv(path)
    try:
        n, R, tau, d = (int(comments[key]) for key in ("n", "R", "tau", "d"))
    except KeyError as exc:
        raise CacheFormatError(f"数据集 CSV 缺少维度注释 {exc}：{path}") from exc
    if len(header) != 4 + d or len(rows) != n * R * tau:
        raise CacheFormatError(f"数据集 CSV 与维度 (n={n}, R={R}, τ={tau}, d={d}) 不一致：{path}")
    features = np.empty((n, R, tau, d))
    labels = np.empty((n, R, tau), dtype=np.int8)
    for row in rows:
        i, r, t, label = (int(cell) for cell in row[:4])
        features[i, r, t] = [float(cell) for cell in row[4:]]
        labels[i, r, t] = label
    gen_params = None
    if "seed" in comments:
        gen_params = GenerationParams(
            alpha=float(comments["alpha"]),
            beta=float(comments["beta"]),
            seed=int(comments["seed"]),
            normalize=comments.get("normalize") == "true",
            stationary=comments.get("stationary") == "true",
        )
    dataset = StreamDataset(
        features=features,
        labels=labels,
        gen_params=gen_params,
        feature_scale=float(comments.get("feature_scale", 1.0)),
    )
    return _freeze(dataset)


def dataset_cache_path(
    cache_dir: Path,
    *,
    n: int,
    R: int,
    tau: int,
    d: int,
    alpha: float,
    beta: float,
    seed: int,
    normalize: bool = True,
    stationary: bool = False,
) -> Path:
    suffix = ("_stationary" if stationary else "") + ("" if normalize else "_raw")
    name = f"stream_n{n}_R{R}_tau{tau}_d{d}_a{format_cell(float(alpha))}_b{format_cell(float(beta))}_s{seed}{suffix}.csv"
    return Path(cache_dir) / name


def get_or_generate_dataset(
    n: int,
    R: int,
    tau: int,
    d: int,
    alpha: float,
    beta: float,
    seed: int,
    *,
    normalize: bool = True,
    stationary: bool = False,
    cache_dir: Optional[Path] = None,
) -> StreamDataset:
    if cache_dir is None:
        return generate_synthetic(n, R, tau, d, alpha, beta, seed, normalize=normalize, stationary=stationary)
    path = dataset_cache_path(
        cache_dir, n=n, R=R, tau=tau, d=d, alpha=alpha, beta=beta, seed=seed, normalize=normalize, stationary=stationary
    )
    if path.exists():
        try:
            return load_dataset_csv(path)
        except CacheFormatError as exc:
            logger.warning("数据缓存不可用，重新生成：%s", exc)
    dataset = generate_synthetic(n, R, tau, d, alpha, beta, seed, normalize=normalize, stationary=stationary)
    export_dataset_csv(dataset, path)
    logger.info("数据集已缓存：%s", path)
    return dataset


def clip_is_inactive(dataset: StreamDataset, clip_bound: float) -> bool:
    """‖a‖ ≤ B_g 时 ‖∇f‖ ≤ ‖a‖ ≤ B_g，裁剪永远不会触发。"""
    return math.sqrt(4.0 * smoothness_estimate(dataset)) <= clip_bound


__all__ = [
    "ClientDatum",
    "GenerationParams",
    "LearnerParams",
    "StreamDataset",
    "batch_gradients_clipped",
    "batch_losses",
    "clip_gradient",
    "clip_is_inactive",
    "dataset_cache_path",
    "export_dataset_csv",
    "feature_covariance_diagonal",
    "generate_synthetic",
    "get_or_generate_dataset",
    "load_dataset_csv",
    "regroup_rounds",
    "logistic_gradient",
    "logistic_gradient_clipped",
    "logistic_loss",
    "round_losses",
    "smoothness_estimate",
]
