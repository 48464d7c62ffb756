"""Configuration constants for the workbench."""

import os
from pathlib import Path

from dotenv import load_dotenv

# Load .env from the project root (parent of vfl_workbench/)
_env_path = Path(__file__).resolve().parent.parent / ".env"
load_dotenv(_env_path)

# Seed used by every subcommand when --seed is not given
DEFAULT_SEED = int(os.environ.get("VFL_SEED", "42"))

# Worker threads for per-sample sweeps; output never depends on it
DEFAULT_JOBS = int(os.environ.get("VFL_JOBS", "1"))

LOG_LEVEL = os.environ.get("VFL_LOG_LEVEL", "INFO").upper()

# Change rate (percent) above which a layer joins a VFL-LoRA mask
CHANGE_RATE_THRESHOLD = float(os.environ.get("VFL_CHANGE_THRESHOLD", "5.0"))

# Greedy decoding budget for probe and evaluation answers
MAX_NEW_TOKENS = int(os.environ.get("VFL_MAX_NEW_TOKENS", "8"))

# Held-out samples per task for evaluation during training
EVAL_SAMPLES = int(os.environ.get("VFL_EVAL_SAMPLES", "64"))

# Training pair seeds are drawn below this value, evaluation seeds at or above it
HELD_OUT_SEED_BASE = 1 << 30

# Fixed salt so matplotlib emits identical SVG ids across runs
SVG_HASH_SALT = "vfl-workbench"
