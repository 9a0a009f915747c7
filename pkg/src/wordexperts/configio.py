"""Sectioned key=value text files used for plans, run configs and checkpoint headers.

Format: ``[section]`` headers, ``key = value`` lines, ``#`` comments, UTF-8.
Writing is canonical (insertion order, single space around ``=``) so files
serialized from equal data are byte-identical.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed config text or schema violations."""


def format_kv(sections: dict[str, dict[str, str]]) -> str:
    out: list[str] = []
    for name, kv in sections.items():
        out.append(f"[{name}]")
        for key, value in kv.items():
            if "\n" in value:
                raise ConfigError(f"value for {key} contains a newline")
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)


def parse_kv(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{name}]")
            current = {}
            sections[name] = current
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in current:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip()
    return sections


def write_kv(path: str | Path, sections: dict[str, dict[str, str]]) -> None:
    Path(path).write_text(format_kv(sections), encoding="utf-8")


def read_kv(path: str | Path) -> dict[str, dict[str, str]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_kv(p.read_text(encoding="utf-8"))
