"""Canonical JSON serialization and digests.

Canonical form: UTF-8 JSON with sorted keys, no insignificant whitespace,
ASCII-only output (non-ASCII escaped as lowercase ``\\uXXXX``) and Python's
shortest round-trip float repr. Every digest in the package is SHA-256 over
these bytes.
"""
from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from typing import Any

DIGEST_ALGORITHM = "sha256"
ZERO_DIGEST = "0" * 64


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False
    ).encode("ascii")


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_bytes(obj)).hexdigest()


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def exact(x: float) -> Fraction:
    """The decimal value a float prints as, as an exact fraction.

    Threshold comparisons (mean >= tau, regret <= rho, score >= theta) are
    made on these values so that boundary cases written as decimals behave
    as written.
    """
    return Fraction(repr(float(x)))
