"""Canonical JSON: the single byte-stable wire and storage form.

Rules: UTF-8, lexicographically sorted keys, no insignificant whitespace,
integers unpadded, floats in shortest round-trip decimal form, NaN/Infinity
rejected. Equal values therefore always encode to identical bytes, which is
what envelope signatures and model determinism checks rely on.
"""

from __future__ import annotations

import json
from typing import Any

from .errors import MalformedDocument


def dumps(value: Any) -> bytes:
    try:
        text = json.dumps(value, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise MalformedDocument(f"value is not canonically encodable: {exc}") from exc
    return text.encode("utf-8")


def loads(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument("document is not valid UTF-8") from exc
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"document is not valid JSON: {exc}") from exc
