"""Shared constants for the CSV persistence layer."""

CSV_SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"

# 分解缓存包内的文件名
FACTORIZATION_B_FILE = "B.csv"
FACTORIZATION_C_FILE = "C.csv"
FACTORIZATION_META_FILE = "meta.csv"

TRACE_FILE = "trace.csv"
TRACE_MODELS_FILE = "trace_models.csv"
REGRET_FILE = "regret.csv"
BNORM_FILE = "bnorm_study.csv"
RESOLVED_CONFIG_FILE = "resolved_config.json"
METADATA_FILE = "metadata.json"

# 环境变量键
JOBS_ENV_KEY = "OFLSIM_JOBS"
FACTORIZATION_CACHE_ENV_KEY = "OFLSIM_FACTORIZATION_CACHE"
DATA_CACHE_ENV_KEY = "OFLSIM_DATA_CACHE"
LOG_LEVEL_ENV_KEY = "OFLSIM_LOG_LEVEL"
