"""In-memory cache of model containers found in MODEL_DIR"""
from __future__ import annotations

import logging
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .container import load_model, read_header
from .errors import ContainerError
from .settings import settings

logger = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r"^[A-Za-z0-9_.@-]+$")

models: dict[str, dict[str, Any]] = {}


def model_path(name: str) -> Path | None:
    if not NAME_PATTERN.match(name) or name.startswith("."):
        return None
    path = Path(settings.MODEL_DIR) / f"{name}.tbst"
    return path if path.is_file() else None


def _summary(name: str, kind: str, meta: dict) -> dict[str, Any]:
    summary = {"name": name, "kind": kind}
    if kind == "lstm":
        summary.update(lookback=meta["lookback"], channels=meta["channels"])
    else:
        summary.update(n_trees=meta["n_trees"], n_features=len(meta["feature_names"]))
    return summary


def list_models() -> list[dict[str, Any]]:
    found = []
    for path in sorted(Path(settings.MODEL_DIR).glob("*.tbst")):
        try:
            kind, meta = read_header(path)
        except ContainerError as e:
            logger.warning(f"Skipping unreadable container {path}: {e}")
            found.append({"name": path.stem, "kind": None, "error": str(e)})
            continue
        found.append(_summary(path.stem, kind, meta))
    return found


def get_model(name: str) -> dict[str, Any] | None:
    """Load (or reuse) a container; reloads when the file changed on disk"""
    path = model_path(name)
    if path is None:
        return None
    mtime = path.stat().st_mtime_ns
    entry = models.get(name)
    if entry is None or entry["mtime"] != mtime:
        model = load_model(path)
        entry = {
            "name": name,
            "kind": "lstm" if hasattr(model, "params") else "gbt",
            "path": path,
            "model": model,
            "mtime": mtime,
            "loaded_at": datetime.now(timezone.utc).isoformat(),
        }
        models[name] = entry
        logger.info(f"Loaded model '{name}' from {path}")
    return entry


def clear() -> None:
    models.clear()
