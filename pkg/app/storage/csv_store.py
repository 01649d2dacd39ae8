"""Versioned CSV helpers: every file starts with `# schema_version=<n>`."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from app.services.exceptions import CacheFormatError
from app.storage.constants import CSV_SCHEMA_VERSION, FLOAT_FORMAT


def format_cell(value: Any) -> str:
    # bool 必须先于 int 判断
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % float(value)
    return str(value)


def write_versioned_csv(
    path: Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    *,
    comments: Mapping[str, Any] | None = None,
) -> Path:
    """写出带版本注释行的 CSV；浮点统一 17 位有效数字，保证字节级可复现。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
        for key, value in (comments or {}).items():
            handle.write(f"# {key}={format_cell(value)}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_cell(cell) for cell in row])
    return path


def read_versioned_csv(path: Path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise CacheFormatError(f"CSV 文件不存在：{path}")
    comments: dict[str, str] = {}
    body: list[str] = []
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                comments[key.strip()] = value.strip()
            else:
                body.append(line)
    version = comments.get("schema_version")
    if version != str(CSV_SCHEMA_VERSION):
        raise CacheFormatError(f"不支持的 CSV schema_version={version!r}：{path}")
    reader = csv.reader(body)
    try:
        header = next(reader)
    except StopIteration as exc:
        raise CacheFormatError(f"CSV 缺少表头：{path}") from exc
    return comments, header, [row for row in reader if row]


def write_matrix_csv(path: Path, matrix: np.ndarray, **comments: Any) -> Path:
    matrix = np.asarray(matrix, dtype=float)
    header = [f"col_{j + 1}" for j in range(matrix.shape[1])]
    return write_versioned_csv(path, header, matrix.tolist(), comments=comments)


def read_matrix_csv(path: Path) -> np.ndarray:
    _, header, rows = read_versioned_csv(path)
    matrix = np.array([[float(cell) for cell in row] for row in rows], dtype=float)
    if matrix.size == 0:
        return np.zeros((0, len(header)))
    if matrix.shape[1] != len(header):
        raise CacheFormatError(f"矩阵列数与表头不一致：{path}")
    return matrix


__all__ = [
    "format_cell",
    "read_matrix_csv",
    "read_versioned_csv",
    "write_matrix_csv",
    "write_versioned_csv",
]
