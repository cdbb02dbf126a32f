"""Hierarchical seed derivation: every random draw in an experiment comes
from the master seed through a documented chain of string/int parts
(master -> iteration -> cell -> node -> run), so any cell replays in
isolation."""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a sequence of ints/strings."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
