"""Convenient re-exports for the CSV persistence layer."""
from .constants import CSV_SCHEMA_VERSION, FLOAT_FORMAT
from .csv_store import (
    format_cell,
    read_matrix_csv,
    read_versioned_csv,
    write_matrix_csv,
    write_versioned_csv,
)

__all__ = [
    "CSV_SCHEMA_VERSION",
    "FLOAT_FORMAT",
    "format_cell",
    "read_matrix_csv",
    "read_versioned_csv",
    "write_matrix_csv",
    "write_versioned_csv",
]
