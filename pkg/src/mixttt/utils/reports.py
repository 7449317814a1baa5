"""Report writers: CSV tables and JSON summaries stamped with the config hash."""

import json
import math
from pathlib import Path
from typing import Any, Dict, Union

import pandas as pd


def write_csv(frame: pd.DataFrame, path: Union[str, Path], config_hash: str) -> Path:
    """Write a table whose first line is '# config_hash=<hex>'"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# config_hash={config_hash}\n")
        frame.to_csv(handle, index=False, lineterminator="\n", float_format="%.10g")
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(payload: Dict[str, Any], path: Union[str, Path], config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(_json_safe(payload))
    document["config_hash"] = config_hash
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
