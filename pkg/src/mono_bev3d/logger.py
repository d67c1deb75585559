from __future__ import annotations

import json
import os
import sys
from datetime import datetime, timezone
from typing import Any

import numpy as np


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and obj != obj:
        return None  # NaN is not valid JSON
    return obj


_LOG_DIR = os.environ.get("MONO_BEV3D_LOG_DIR", ".logs")
_MAX_BYTES = int(os.environ.get("MONO_BEV3D_LOG_MAX_BYTES", "1048576"))  # 1MB
_BACKUPS = int(os.environ.get("MONO_BEV3D_LOG_BACKUPS", "5"))
_STDOUT = os.environ.get("MONO_BEV3D_LOG_STDOUT", "1") != "0"


def _write_file_line(line: str) -> None:
    try:
        os.makedirs(_LOG_DIR, exist_ok=True)
        path = os.path.join(_LOG_DIR, "events.log")
        # naive rotation
        if os.path.exists(path) and os.path.getsize(path) > _MAX_BYTES:
            for i in range(_BACKUPS, 0, -1):
                older = f"{path}.{i}"
                newer = f"{path}.{i-1}" if i > 1 else path
                if os.path.exists(older):
                    try: os.remove(older)
                    except Exception: pass
                if os.path.exists(newer):
                    try: os.rename(newer, older)
                    except Exception: pass
        with open(path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
    except Exception:
        # ignore file logging errors
        pass


def log_event(event: str, **fields: Any) -> None:
    record = {
        "ts": datetime.now(timezone.utc).isoformat(),
        "event": event,
        **_jsonable(fields),
    }
    line = json.dumps(record, ensure_ascii=False)
    if _STDOUT:
        sys.stdout.write(line + "\n")
        sys.stdout.flush()
    _write_file_line(line)
