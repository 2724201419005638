import os
import logging
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv

from shared.exceptions import ConfigError

load_dotenv()

# Paths
DATA_DIR = os.getenv("EDPCNN_DATA_DIR", "data")
OUTPUT_DIR = os.getenv("EDPCNN_OUTPUT_DIR", "runs")
MANIFEST_FILE = "manifest.json"
RESOLVED_CONFIG_FILE = "resolved-config.txt"

# Artifact names
CHECKPOINT_FILE = "best.ckpt"
TRAIN_LOG_FILE = "log.csv"
EVALS_FILE = "evals.json"

# Logging Configuration
LOG_LEVEL = os.getenv("EDPCNN_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Generation
GEN_WORKERS = int(os.getenv("EDPCNN_WORKERS", "1"))

# Star pattern defaults for the 64x64 synthetic benchmark
DEFAULT_NUM_LINES = 24
DEFAULT_POINTS_PER_LINE = 32
DEFAULT_STAR_RADIUS = 28.0
DEFAULT_DELTA = 2
DEFAULT_SMOOTH_WINDOW = 5

# Checkpoint file header
CHECKPOINT_MAGIC = b"EDPCKPT\x00"
CHECKPOINT_VERSION = 1


def setup_logging(level: Optional[str] = None):
    """Setup logging configuration"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
        force=True,
    )
    return logging.getLogger(__name__)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse a flat key=value run config. Blank lines and '#' comments are skipped."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config_file(path: Path) -> Dict[str, str]:
    """Read a key=value run config from disk"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    return parse_config_text(text, source=str(path))


def format_config_text(values: Dict[str, object]) -> str:
    """Render settings as sorted key=value lines"""
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
