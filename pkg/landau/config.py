import os
from dotenv import load_dotenv, find_dotenv

# Load from .env if present; fallback to .env.example for missing keys
env_path = find_dotenv(".env", usecwd=True)
if env_path:
    load_dotenv(env_path, override=True)
example_path = find_dotenv(".env.example", usecwd=True)
if example_path:
    load_dotenv(example_path, override=False)

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
PRESETS_DIR = os.path.join(BASE_DIR, "data", "presets")

SOFTWARE_VERSION = "0.3.0"

# Default worker threads for torch / BLAS; --threads overrides per invocation
LANDAU_THREADS = int(os.getenv("LANDAU_THREADS", "8"))
LANDAU_RUNS_DIR = os.getenv("LANDAU_RUNS_DIR", "runs")
LANDAU_LOG_LEVEL = os.getenv("LANDAU_LOG_LEVEL", "INFO").upper()

# Soft-core width for the Coulomb kernel, |z| -> sqrt(|z|^2 + eps^2)
COULOMB_REG_EPS = float(os.getenv("LANDAU_COULOMB_REG_EPS", "0.1"))

# Upper bound on query x particle pairs materialized per drift chunk
DRIFT_CHUNK = int(os.getenv("LANDAU_DRIFT_CHUNK", "2000000"))

# Trajectories with at least this many particles are stored in binary form
BINARY_SNAPSHOT_THRESHOLD = int(os.getenv("LANDAU_BINARY_SNAPSHOT_THRESHOLD", "10000"))
