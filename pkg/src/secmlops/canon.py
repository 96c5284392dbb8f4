"""Canonical JSON bytes and digests.

One serialization rule everywhere: keys sorted, no whitespace, UTF-8,
floats in Python's shortest round-trip form, NaN/Inf rejected.  Hashing
these bytes gives digests that are stable across runs and platforms.
"""
from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)


def canonical_json_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_json(obj: Any) -> str:
    """sha256 hex digest of the canonical JSON encoding of obj."""
    return sha256_hex(canonical_json_bytes(obj))
