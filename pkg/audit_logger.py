"""Structured JSON-lines event log.

Every record is one line: {"ts", "run", "event", "details"}. The path comes
from FIRESIGHT_EVENT_LOG (default ``events.log``); an empty value turns
logging off. The CLI redirects it into each run's output directory.
"""
import os
import json
import threading
import datetime
from typing import Optional, Dict, Any

_LOG_LOCK = threading.Lock()

EVENT_LOG_PATH = os.environ.get('FIRESIGHT_EVENT_LOG', 'events.log')

_run_id: Optional[str] = None


def configure(path: Optional[str]):
    """Point the log at ``path`` (None or '' disables it)."""
    global EVENT_LOG_PATH
    EVENT_LOG_PATH = path or ''


def set_run_id(run_id: Optional[str]):
    global _run_id
    _run_id = run_id


def get_run_id() -> Optional[str]:
    return _run_id


def _serialize(obj: Any):
    if isinstance(obj, (list, dict, str, int, float, bool, type(None))):
        return obj
    if isinstance(obj, tuple):
        return list(obj)
    # numpy scalars and everything else
    if hasattr(obj, 'item'):
        try:
            return obj.item()
        except Exception:
            pass
    return str(obj)


def log_event(event: str, details: Optional[Dict[str, Any]] = None):
    if not EVENT_LOG_PATH:
        return
    record = {
        'ts': datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds'),
        'run': _run_id,
        'event': event,
        'details': {k: _serialize(v) for k, v in (details or {}).items()}
    }
    line = json.dumps(record, ensure_ascii=False)
    with _LOG_LOCK:
        parent = os.path.dirname(EVENT_LOG_PATH)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(EVENT_LOG_PATH, 'a', encoding='utf-8') as f:
            f.write(line + '\n')


def read_events(path: Optional[str] = None, event: Optional[str] = None):
    """Return parsed records, optionally filtered by event name."""
    path = path or EVENT_LOG_PATH
    if not path or not os.path.exists(path):
        return []
    out = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue
            if event is None or rec.get('event') == event:
                out.append(rec)
    return out


def rotate_if_needed(max_bytes: int = 1_000_000, keep: int = 3):
    try:
        if not EVENT_LOG_PATH or not os.path.exists(EVENT_LOG_PATH):
            return
        size = os.path.getsize(EVENT_LOG_PATH)
        if size < max_bytes:
            return
        base = EVENT_LOG_PATH
        for i in range(keep - 1, 0, -1):
            older = f"{base}.{i}"
            newer = f"{base}.{i+1}"
            if os.path.exists(older):
                os.replace(older, newer)
        os.replace(base, f"{base}.1")
    except Exception:
        pass
