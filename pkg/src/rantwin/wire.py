"""Canonical JSON wire forms.

The JSON bodies documented in docs/wire.md are normative; this module owns
the one canonical encoding (compact separators, sorted keys) so byte-size
checks and byte-identical outputs are stable across runs.
"""

from __future__ import annotations

import json
from typing import Any, Iterable

WIRE_VERSION = 1

# Patch entries travel as (path, value, sourceTime) triples in process;
# on the wire each entry is {"path": ..., "sourceTime": ..., "value": ...}.
PatchEntry = tuple  # (path: str, value, source_time_us: int)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=False)


def dump_canonical(obj: Any, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def encode_patch(entries: Iterable[PatchEntry]) -> str:
    return canonical_json(
        [{"path": p, "sourceTime": st, "value": _jsonable(v)} for p, v, st in entries]
    )


def decode_patch(text: str) -> list[PatchEntry]:
    raw = json.loads(text)
    return [(e["path"], _tupled(e["value"]), e["sourceTime"]) for e in raw]


def patch_size_bytes(entries: Iterable[PatchEntry]) -> int:
    """Exact size of the canonical wire form, in bytes."""
    return len(encode_patch(entries).encode("utf-8"))


# Upper bound on the wire size of one entry beyond its path length: covers
# braces, key names, a 20-digit sourceTime and a geospatial value pair.
_ENTRY_OVERHEAD_BOUND = 170


def patch_size_upper_bound(entries) -> int:
    """Cheap bound >= patch_size_bytes; lets the hot path skip serialization."""
    return 2 + sum(_ENTRY_OVERHEAD_BOUND + len(p) for p, _, _ in entries)


def encode_receipt(status: str, response_time_us: int, error: str | None = None) -> str:
    body: dict[str, Any] = {"status": status, "responseTime": response_time_us}
    if error is not None:
        body["error"] = error
    return canonical_json(body)


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(value)
    return value
