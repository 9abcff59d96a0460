"""Flat ``dotted.key = value`` structured-text files.

All on-disk metadata in this toolkit (dataset stats, checkpoint sidecars,
attack/scan configs, scan reports) uses one line-oriented format: ``key = value``
pairs with ``#`` comments, keys grouped by dotted prefixes. Values are plain
strings; callers parse numbers/lists with the typed getters below.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from typing import Iterable, Mapping


class KVError(ValueError):
    pass


def format_kv(items: Mapping[str, object], header: str | None = None) -> str:
    lines = []
    if header:
        for ln in header.splitlines():
            lines.append(f"# {ln}" if ln else "#")
    for key, value in items.items():
        _check_key(key)
        sval = _to_str(value)
        if "\n" in sval:
            raise KVError(f"value for {key!r} contains a newline")
        lines.append(f"{key} = {sval}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> "OrderedDict[str, str]":
    out: OrderedDict[str, str] = OrderedDict()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KVError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        _check_key(key)
        if key in out:
            raise KVError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def write_kv(path: str | os.PathLike, items: Mapping[str, object], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(items, header=header))


def read_kv(path: str | os.PathLike) -> "OrderedDict[str, str]":
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def subkeys(items: Mapping[str, str], prefix: str) -> "OrderedDict[str, str]":
    """Entries under ``prefix.``, with the prefix stripped."""
    pre = prefix.rstrip(".") + "."
    return OrderedDict((k[len(pre):], v) for k, v in items.items() if k.startswith(pre))


def get_int(items: Mapping[str, str], key: str) -> int:
    return int(_require(items, key))


def get_float(items: Mapping[str, str], key: str) -> float:
    return float(_require(items, key))


def get_bool(items: Mapping[str, str], key: str) -> bool:
    val = _require(items, key).lower()
    if val in ("true", "1", "yes"):
        return True
    if val in ("false", "0", "no"):
        return False
    raise KVError(f"{key}: not a boolean: {val!r}")


def get_floats(items: Mapping[str, str], key: str) -> list[float]:
    return [float(tok) for tok in _split_list(_require(items, key))]


def get_ints(items: Mapping[str, str], key: str) -> list[int]:
    return [int(tok) for tok in _split_list(_require(items, key))]


def fingerprint(items: Mapping[str, object]) -> str:
    """Short stable hash of a mapping's canonical (sorted) serialization."""
    import hashlib

    text = format_kv(OrderedDict(sorted((k, items[k]) for k in items)))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def coerce(value: str):
    """Best-effort typed read of one value: bool, int, float, list, or str."""
    if "," in value:
        return [coerce(tok) for tok in _split_list(value)]
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _require(items: Mapping[str, str], key: str) -> str:
    if key not in items:
        raise KVError(f"missing key {key!r}")
    return items[key]


def _split_list(value: str) -> Iterable[str]:
    toks = [tok.strip() for tok in value.split(",")]
    return [tok for tok in toks if tok]


def _to_str(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_to_str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _check_key(key: str) -> None:
    if not key or any(ch.isspace() for ch in key):
        raise KVError(f"bad key {key!r}")
