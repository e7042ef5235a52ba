"""Versioned JSON artifacts with an embedded payload digest.

Every persisted model, catalog or cluster result is wrapped in an envelope::

    {"format": "powerprof", "kind": ..., "version": 1, "digest": <sha256>, "payload": {...}}

Floats are written with ``repr`` precision, so a save/load round trip is exact at
64-bit and re-saving a loaded artifact reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from powerprof.errors import DataError

FORMAT = "powerprof"
VERSION = 1


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def payload_digest(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps_artifact(kind: str, payload: Any) -> str:
    payload = to_jsonable(payload)
    envelope = {
        "format": FORMAT,
        "kind": kind,
        "version": VERSION,
        "digest": payload_digest(payload),
        "payload": payload,
    }
    return json.dumps(envelope, sort_keys=True, indent=1) + "\n"


def save_artifact(path: str | os.PathLike, kind: str, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = dumps_artifact(kind, payload)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def loads_artifact(text: str, kind: str | None = None) -> dict:
    try:
        envelope = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt artifact: {exc}") from None
    if not isinstance(envelope, dict) or envelope.get("format") != FORMAT:
        raise DataError("corrupt artifact: missing powerprof envelope")
    version = envelope.get("version")
    if version != VERSION:
        raise DataError(f"unsupported version {version}")
    if kind is not None and envelope.get("kind") != kind:
        raise DataError(f"expected artifact kind {kind!r}, got {envelope.get('kind')!r}")
    payload = envelope.get("payload")
    actual = payload_digest(payload)
    if actual != envelope.get("digest"):
        raise DataError(
            f"corrupt artifact: digest mismatch (stored {envelope.get('digest')}, computed {actual})"
        )
    return payload


def load_artifact(path: str | os.PathLike, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"artifact not found: {path}")
    return loads_artifact(path.read_text(encoding="utf-8"), kind)
