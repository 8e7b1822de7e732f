# app/commands/common.py
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from app.errors import ConfigError
from app.services import seeding

logger = logging.getLogger(__name__)

CONFIG_ECHO = "config_echo.json"


def ensure_out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    return out


def write_config_echo(out_dir: Path, command: str, config: Dict[str, Any], seed: Optional[int]) -> Path:
    """Effective config plus the first word of every named random stream."""
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "seeding": seeding.describe(seed) if seed is not None else {},
    }
    path = out_dir / CONFIG_ECHO
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path
