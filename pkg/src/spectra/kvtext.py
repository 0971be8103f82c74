"""Flat ``key = value`` text files (manifests, run configs, metric dumps)."""

from __future__ import annotations


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def dump_kv(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def split_list(value: str, sep: str = ",") -> list[str]:
    return [v.strip() for v in value.split(sep)] if value.strip() else []
